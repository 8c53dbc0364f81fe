use std::collections::BTreeMap;

use thiserror::Error;

use super::{
    ContextHistory, FlowDefinition, Message, MessageKind, RunConfig, RunResult, RunStatus, StateId,
};
use crate::backend::BackendReply;
use crate::env::detect_stall;
use crate::output::{invoke, Invocation, InvokeContext, OutputBindings, OutputError, OutputKind};
use crate::trace::{RunTrace, TraceEvent, TraceMessage, TraceRecord, TraceTransition};
use crate::transition::{decide, DecideError, RunScope};

pub const PRODUCER_TASK_INPUT: &str = "task-input";
/// Producer of the memory message injected ahead of a retried task.
pub const PRODUCER_MEMORY: &str = "reflexion-memory";

/// The task handed to a run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TaskInput {
    pub text: String,
    pub task_type: Option<String>,
    /// Prompt placed right after the task message (e.g. accumulated
    /// reflections).
    pub preamble: Option<String>,
}

impl TaskInput {
    pub fn new(text: impl Into<String>) -> Self {
        TaskInput {
            text: text.into(),
            ..Default::default()
        }
    }

    pub fn with_task_type(mut self, task_type: impl Into<String>) -> Self {
        self.task_type = Some(task_type.into());
        self
    }
}

impl From<&str> for TaskInput {
    fn from(s: &str) -> Self {
        TaskInput::new(s)
    }
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("{kind} `{name}` referenced by state `{state}` has no binding")]
    UnresolvedBinding {
        kind: &'static str,
        name: String,
        state: String,
    },
    #[error("state `{0}` does not exist")]
    UnknownState(String),
    #[error("max_transitions must be at least 1")]
    InvalidConfig,
    #[error(transparent)]
    Decide(#[from] DecideError),
}

/// Current state and a copy of the history.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot {
    pub state: StateId,
    pub history: ContextHistory,
}

/// A run in progress, advanced one state entry at a time.
pub struct FlowRun<'f> {
    flow: &'f FlowDefinition,
    config: RunConfig,
    state: StateId,
    history: ContextHistory,
    trace: RunTrace,
    replies: Vec<BackendReply>,
    visited: Vec<StateId>,
    transitions: usize,
    step: usize,
    scope: RunScope,
    env_observations: usize,
    status: Option<RunStatus>,
    error: Option<String>,
}

/// Checks that every tool and backend the flow names is bound.
pub fn check_bindings(flow: &FlowDefinition, bindings: &OutputBindings) -> Result<(), EngineError> {
    for state in &flow.states {
        let missing = |kind, name: &str| EngineError::UnresolvedBinding {
            kind,
            name: name.to_string(),
            state: state.id.to_string(),
        };
        for output in &state.outputs {
            if let Some(call) = &output.tool {
                if !bindings.tools.contains_key(&call.tool) {
                    return Err(missing("tool", &call.tool));
                }
            }
            if let Some(agent) = &output.agent {
                if !bindings.backends.contains_key(&agent.backend) {
                    return Err(missing("backend", &agent.backend));
                }
            }
        }
        for rule in &state.rules {
            if let Some(judge) = rule.when.judge() {
                if !bindings.backends.contains_key(&judge.backend) {
                    return Err(missing("backend", &judge.backend));
                }
            }
        }
    }
    Ok(())
}

impl<'f> FlowRun<'f> {
    pub fn start(
        flow: &'f FlowDefinition,
        task: TaskInput,
        bindings: &OutputBindings,
        config: &RunConfig,
    ) -> Result<Self, EngineError> {
        if config.max_transitions == 0 {
            return Err(EngineError::InvalidConfig);
        }
        if flow.state(flow.initial.as_str()).is_none() {
            return Err(EngineError::UnknownState(flow.initial.to_string()));
        }
        check_bindings(flow, bindings)?;
        let mut run = FlowRun {
            flow,
            config: config.clone(),
            state: flow.initial.clone(),
            history: ContextHistory::new(),
            trace: RunTrace::new(),
            replies: Vec::new(),
            visited: vec![flow.initial.clone()],
            transitions: 0,
            step: 0,
            scope: RunScope {
                task_type: task.task_type.clone(),
                ..Default::default()
            },
            env_observations: 0,
            status: None,
            error: None,
        };
        run.append(MessageKind::Task, task.text, PRODUCER_TASK_INPUT.into(), TraceEvent::TaskInput, None);
        if let Some(memory) = task.preamble {
            run.append(MessageKind::Prompt, memory, PRODUCER_MEMORY.into(), TraceEvent::OutputProduced, None);
        }
        Ok(run)
    }

    fn append(
        &mut self,
        kind: MessageKind,
        content: String,
        producer: String,
        event: TraceEvent,
        reply: Option<&BackendReply>,
    ) {
        if self.config.record_trace {
            let mut record = TraceRecord::new(self.step, self.state.clone(), event);
            record.message = Some(TraceMessage {
                kind,
                producer: producer.clone(),
                content: content.clone(),
            });
            if let Some(r) = reply {
                record.tokens = Some((r.prompt_tokens, r.completion_tokens));
                record.model = Some(r.model.clone());
            }
            self.trace.push(record);
        }
        self.history.push(Message {
            kind,
            content,
            producer,
            step: self.step,
            state: self.state.clone(),
        });
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            state: self.state.clone(),
            history: self.history.clone(),
        }
    }

    pub fn status(&self) -> Option<RunStatus> {
        self.status
    }

    pub fn transitions_taken(&self) -> usize {
        self.transitions
    }

    fn finish(&mut self, status: RunStatus) -> RunStatus {
        if self.config.record_trace {
            let mut record = TraceRecord::new(self.step, self.state.clone(), TraceEvent::Terminated);
            record.status = Some(status);
            self.trace.push(record);
        }
        self.status = Some(status);
        status
    }

    fn invoke_with_retry(
        &self,
        index: usize,
        bindings: &mut OutputBindings,
    ) -> Result<Invocation, OutputError> {
        let spec = &self.flow.state(self.state.as_str()).expect("current state exists").outputs[index];
        let ctx = InvokeContext {
            templates: &self.flow.templates,
            task_type: self.scope.task_type.as_deref(),
            assembly_override: self.config.assembly_override,
        };
        invoke(spec, &self.history, bindings, &ctx).or_else(|_| invoke(spec, &self.history, bindings, &ctx))
    }

    /// Processes the current state entry: terminal check, outputs, halting
    /// checks and one transition. Returns the final status once the run is
    /// over.
    pub fn advance(&mut self, bindings: &mut OutputBindings) -> Result<Option<RunStatus>, EngineError> {
        if let Some(status) = self.status {
            return Ok(Some(status));
        }
        if self.flow.is_final(self.state.as_str()) {
            return Ok(Some(self.finish(RunStatus::ReachedFinal)));
        }
        let flow = self.flow;
        let state = flow
            .state(self.state.as_str())
            .ok_or_else(|| EngineError::UnknownState(self.state.to_string()))?;
        if self.step == 0 {
            self.step = 1;
        }
        for (index, output) in state.outputs.iter().enumerate() {
            let invocation = match self.invoke_with_retry(index, bindings) {
                Ok(inv) => inv,
                Err(e) => {
                    self.error = Some(format!("{}: {e}", output.name));
                    return Ok(Some(self.finish(RunStatus::OutputFunctionError)));
                }
            };
            if let Some(prelude) = invocation.prelude {
                self.append(prelude.kind, prelude.content, prelude.producer, TraceEvent::OutputProduced, None);
            }
            let draft = invocation.message;
            self.append(
                draft.kind,
                draft.content,
                draft.producer,
                TraceEvent::OutputProduced,
                invocation.reply.as_ref(),
            );
            if let Some(reply) = invocation.reply {
                self.replies.push(reply);
            }
            if output.kind == OutputKind::Tool {
                self.env_observations += 1;
            }
            self.scope.env_done |= invocation.done;
            if let Some((key, value)) = invocation.captured {
                self.scope.vars.insert(key, value);
            }
        }
        if self.config.halt_on_stall && !self.scope.env_done && detect_stall(&self.history) {
            return Ok(Some(self.finish(RunStatus::Stalled)));
        }
        if let Some(limit) = self.config.max_interactions {
            if self.env_observations >= limit && !self.scope.env_done {
                return Ok(Some(self.finish(RunStatus::InteractionLimit)));
            }
        }
        if self.transitions >= self.config.max_transitions {
            return Ok(Some(self.finish(RunStatus::MaxTransitionsExceeded)));
        }
        let decision = decide(state, &self.history, bindings, &self.scope, &flow.error_markers)?;
        if self.config.record_trace {
            let mut record = TraceRecord::new(self.step, self.state.clone(), TraceEvent::TransitionTaken);
            record.transition = Some(TraceTransition {
                from: self.state.clone(),
                to: decision.target.clone(),
                via: decision.via,
            });
            if let Some(r) = &decision.judge_reply {
                record.tokens = Some((r.prompt_tokens, r.completion_tokens));
                record.model = Some(r.model.clone());
            }
            self.trace.push(record);
        }
        if let Some(reply) = decision.judge_reply {
            self.replies.push(reply);
        }
        if flow.state(decision.target.as_str()).is_none() {
            return Err(EngineError::UnknownState(decision.target.to_string()));
        }
        self.state = decision.target;
        self.visited.push(self.state.clone());
        self.transitions += 1;
        self.step += 1;
        Ok(None)
    }

    pub fn finish_result(self) -> RunResult {
        RunResult {
            exit_state: self.state,
            history: self.history,
            status: self.status.unwrap_or(RunStatus::OutputFunctionError),
            transitions_taken: self.transitions,
            trace: self.trace,
            replies: self.replies,
            error: self.error,
            variables: self.scope.vars,
            visited: self.visited,
        }
    }

    pub fn variables(&self) -> &BTreeMap<String, String> {
        &self.scope.vars
    }
}

/// Executes a flow on one task until a final state, the transition cap, a
/// halting condition, or an unrecoverable output-function failure.
pub fn run_flow(
    flow: &FlowDefinition,
    task: TaskInput,
    bindings: &mut OutputBindings,
    config: &RunConfig,
) -> Result<RunResult, EngineError> {
    let mut run = FlowRun::start(flow, task, bindings, config)?;
    while run.advance(bindings)?.is_none() {}
    Ok(run.finish_result())
}
