//! Iterative refinement over trials: after each failed trial a reflector
//! writes a short lesson, and every later trial of that task starts with all
//! lessons so far.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backend::{cost_by_reply_model, BackendError, BackendReply, LlmBackend, PricingTable};
use crate::eval::{parallel_map, run_task, BackendFactory, Suite, SuiteReport, TaskMetrics};
use crate::flow::{Assembly, ContextHistory, RunConfig};
use crate::output::{assemble_context, AgentSpec, InvokeContext};

/// Reflection prompt used when none is supplied.
pub const DEFAULT_REFLECTION_PROMPT: &str = "You were given a task and attempted it, but the attempt failed. \
Read the transcript of the attempt, find where it went wrong, and write a short plan that avoids the mistake \
next time. Answer in two or three sentences.";

pub fn default_reflector() -> AgentSpec {
    AgentSpec::new(DEFAULT_REFLECTION_PROMPT)
}

/// Reflections gathered for one task, oldest first.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ReflectionMemory {
    entries: Vec<String>,
}

impl ReflectionMemory {
    pub fn push(&mut self, reflection: String) {
        self.entries.push(reflection);
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// The text injected ahead of the next trial, if there is any memory.
    pub fn preamble(&self) -> Option<String> {
        (!self.entries.is_empty()).then(|| self.entries.join("\n"))
    }
}

/// Asks the reflector about a failed transcript.
pub fn reflect(
    failed_history: &ContextHistory,
    reflector: &AgentSpec,
    backend: &mut dyn LlmBackend,
) -> Result<BackendReply, BackendError> {
    let templates = BTreeMap::new();
    let ctx = InvokeContext {
        templates: &templates,
        task_type: None,
        assembly_override: Some(Assembly::SystemMessage),
    };
    let assembled =
        assemble_context(reflector, failed_history, &ctx).map_err(|e| BackendError::Config(e.to_string()))?;
    backend.complete(&assembled.payload)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    /// 1-based trial number.
    pub trial: usize,
    /// Tasks run in this trial (unsolved ones only after the first).
    pub report: SuiteReport,
    /// Reflections that could not be produced, by task.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub reflection_errors: BTreeMap<String, String>,
    /// Cost of the reflector calls made after this trial.
    pub reflection_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationReport {
    pub suite: String,
    pub trials: Vec<TrialReport>,
    /// Fraction of tasks solved by the end of each trial.
    pub cumulative_success_rate: Vec<f64>,
    /// Number of tasks solved by the end of each trial.
    pub cumulative_solved: Vec<usize>,
    /// Total spend by the end of each trial.
    pub cumulative_cost: Vec<f64>,
    pub memory: BTreeMap<String, ReflectionMemory>,
}

struct TaskTrial {
    metrics: TaskMetrics,
    reflection_error: Option<String>,
    reflection_cost: f64,
}

struct TaskTrials {
    key: String,
    trials: Vec<Option<TaskTrial>>,
    memory: ReflectionMemory,
}

fn reply_cost(reply: &BackendReply, pricing: Option<&PricingTable>) -> f64 {
    pricing
        .and_then(|p| cost_by_reply_model(std::slice::from_ref(reply), p).ok())
        .unwrap_or(0.0)
}

fn run_task_trials(
    suite: &Suite,
    task: &crate::eval::SuiteTask,
    factory: &dyn BackendFactory,
    reflector: &AgentSpec,
    base: &RunConfig,
    trials: usize,
) -> TaskTrials {
    let config = suite.settings.config_for(base, task.spec.environment);
    let mut memory = ReflectionMemory::default();
    let mut out = Vec::with_capacity(trials);
    let mut reflector_backend: Option<Result<Box<dyn LlmBackend>, String>> = None;
    let mut solved = false;
    for trial in 1..=trials {
        if solved {
            out.push(None);
            continue;
        }
        let outcome = run_task(
            &suite.flow,
            task,
            factory,
            &config,
            suite.pricing.as_ref(),
            memory.preamble(),
        );
        solved = outcome.metrics.success;
        let mut record = TaskTrial {
            metrics: outcome.metrics,
            reflection_error: None,
            reflection_cost: 0.0,
        };
        if !solved && trial < trials {
            let backend = reflector_backend.get_or_insert_with(|| factory.reflector(task));
            let history = outcome.run.map(|r| r.history).unwrap_or_default();
            match backend {
                Ok(b) => match reflect(&history, reflector, b.as_mut()) {
                    Ok(reply) => {
                        record.reflection_cost = reply_cost(&reply, suite.pricing.as_ref());
                        memory.push(reply.content);
                    }
                    Err(e) => record.reflection_error = Some(e.to_string()),
                },
                Err(e) => record.reflection_error = Some(e.clone()),
            }
        }
        out.push(Some(record));
    }
    TaskTrials {
        key: task.key(),
        trials: out,
        memory,
    }
}

/// Runs up to `trials` attempts per task, carrying reflections forward.
/// Solved tasks are not re-run.
pub fn run_with_reflexion(
    suite: &Suite,
    factory: &dyn BackendFactory,
    reflector: &AgentSpec,
    base: &RunConfig,
    trials: usize,
    parallelism: usize,
) -> IterationReport {
    let trials = trials.max(1);
    let per_task = parallel_map(&suite.tasks, parallelism, |task| {
        run_task_trials(suite, task, factory, reflector, base, trials)
    });
    let n = suite.tasks.len();
    let mut report = IterationReport {
        suite: suite.name.clone(),
        trials: Vec::with_capacity(trials),
        cumulative_success_rate: Vec::with_capacity(trials),
        cumulative_solved: Vec::with_capacity(trials),
        cumulative_cost: Vec::with_capacity(trials),
        memory: BTreeMap::new(),
    };
    let mut solved = 0;
    let mut cost = 0.0;
    for t in 0..trials {
        let mut tasks = Vec::new();
        let mut reflection_errors = BTreeMap::new();
        let mut reflection_cost = 0.0;
        for task in &per_task {
            if let Some(record) = &task.trials[t] {
                tasks.push(record.metrics.clone());
                if let Some(e) = &record.reflection_error {
                    reflection_errors.insert(task.key.clone(), e.clone());
                }
                reflection_cost += record.reflection_cost;
            }
        }
        solved += tasks.iter().filter(|m| m.success).count();
        let trial_report = SuiteReport::new(suite.name.clone(), suite.flow.metadata.name.clone(), tasks);
        cost += trial_report.aggregates.total_cost + reflection_cost;
        report.cumulative_solved.push(solved);
        report
            .cumulative_success_rate
            .push(if n == 0 { 0.0 } else { solved as f64 / n as f64 });
        report.cumulative_cost.push(cost);
        report.trials.push(TrialReport {
            trial: t + 1,
            report: trial_report,
            reflection_errors,
            reflection_cost,
        });
    }
    report.memory = per_task.into_iter().map(|t| (t.key, t.memory)).collect();
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::ScriptedBackend;

    #[test]
    fn reflect_passes_reply_through() {
        let mut backend = ScriptedBackend::from_replies(["I should check drawer 2 first."]);
        let reply = reflect(&ContextHistory::new(), &default_reflector(), &mut backend).unwrap();
        assert_eq!(reply.content, "I should check drawer 2 first.");
    }

    #[test]
    fn memory_preamble_joins_in_order() {
        let mut m = ReflectionMemory::default();
        assert_eq!(m.preamble(), None);
        m.push("first".into());
        m.push("second".into());
        assert_eq!(m.preamble().unwrap(), "first\nsecond");
        assert_eq!(m.len(), 2);
    }
}
