//! The state-machine data model: states, messages, the context history and
//! the run configuration/result types consumed by the engine.

mod engine;

use std::borrow::Borrow;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::output::{OutputFunctionSpec, TemplateSpec};
use crate::transition::TransitionRule;

pub use crate::transition::RunScope;
pub use engine::{
    check_bindings, run_flow, EngineError, FlowRun, Snapshot, TaskInput, PRODUCER_MEMORY,
    PRODUCER_TASK_INPUT,
};

/// Name of a state. Unique within one flow; valid names match
/// `[A-Za-z_][A-Za-z0-9_]*` (checked by the validator, not at construction,
/// so malformed documents still parse and can be reported on).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateId(String);

impl StateId {
    pub fn new(name: impl Into<String>) -> Self {
        StateId(name.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_well_formed(&self) -> bool {
        let mut chars = self.0.chars();
        match chars.next() {
            Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
            _ => return false,
        }
        chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
    }
}

impl fmt::Display for StateId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl Borrow<str> for StateId {
    fn borrow(&self) -> &str {
        &self.0
    }
}

impl From<&str> for StateId {
    fn from(s: &str) -> Self {
        StateId(s.to_string())
    }
}

impl PartialEq<str> for StateId {
    fn eq(&self, other: &str) -> bool {
        self.0 == other
    }
}

impl PartialEq<&str> for StateId {
    fn eq(&self, other: &&str) -> bool {
        self.0 == *other
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MessageKind {
    Task,
    Prompt,
    ModelResponse,
    Observation,
}

/// One unit of text in the context history.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub kind: MessageKind,
    pub content: String,
    /// Output function, environment tool, or `task-input`.
    pub producer: String,
    /// Engine step that appended the message. The task is step 0 and every
    /// state entry advances the step by one.
    pub step: usize,
    pub state: StateId,
}

/// Append-only record of every message produced during a run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ContextHistory {
    messages: Vec<Message>,
}

impl ContextHistory {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a message. Steps must not go backwards.
    pub fn push(&mut self, message: Message) {
        debug_assert!(
            self.messages.last().is_none_or(|m| m.step <= message.step),
            "history steps must be non-decreasing"
        );
        self.messages.push(message);
    }

    pub fn messages(&self) -> &[Message] {
        &self.messages
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    pub fn last(&self) -> Option<&Message> {
        self.messages.last()
    }

    pub fn last_of(&self, kind: MessageKind) -> Option<&Message> {
        self.messages.iter().rev().find(|m| m.kind == kind)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Message> {
        self.messages.iter()
    }
}

impl<'a> IntoIterator for &'a ContextHistory {
    type Item = &'a Message;
    type IntoIter = std::slice::Iter<'a, Message>;

    fn into_iter(self) -> Self::IntoIter {
        self.messages.iter()
    }
}

impl FromIterator<Message> for ContextHistory {
    fn from_iter<I: IntoIterator<Item = Message>>(iter: I) -> Self {
        ContextHistory {
            messages: iter.into_iter().collect(),
        }
    }
}

/// A state: the ordered output functions run on every entry, the ordered
/// transition rules, and the default target used when no rule fires.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateSpec {
    pub id: StateId,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub outputs: Vec<OutputFunctionSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rules: Vec<TransitionRule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<StateId>,
}

impl StateSpec {
    pub fn new(id: impl Into<String>) -> Self {
        StateSpec {
            id: StateId::new(id),
            outputs: Vec::new(),
            rules: Vec::new(),
            default: None,
        }
    }

    pub fn with_output(mut self, output: OutputFunctionSpec) -> Self {
        self.outputs.push(output);
        self
    }

    pub fn with_rule(mut self, rule: TransitionRule) -> Self {
        self.rules.push(rule);
        self
    }

    pub fn with_default(mut self, target: impl Into<String>) -> Self {
        self.default = Some(StateId::new(target));
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowMetadata {
    pub name: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub version: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
}

/// A complete state machine: states, initial state, final states, response
/// templates and the error markers used to classify observations.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowDefinition {
    pub metadata: FlowMetadata,
    pub states: Vec<StateSpec>,
    pub initial: StateId,
    pub finals: Vec<StateId>,
    pub templates: std::collections::BTreeMap<String, TemplateSpec>,
    pub error_markers: Vec<String>,
}

pub const DEFAULT_ERROR_MARKERS: [&str; 2] = ["Error", "error:"];

impl FlowDefinition {
    pub fn new(name: impl Into<String>, initial: impl Into<String>) -> Self {
        FlowDefinition {
            metadata: FlowMetadata {
                name: name.into(),
                ..Default::default()
            },
            states: Vec::new(),
            initial: StateId::new(initial),
            finals: Vec::new(),
            templates: Default::default(),
            error_markers: DEFAULT_ERROR_MARKERS.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn with_state(mut self, state: StateSpec) -> Self {
        self.states.push(state);
        self
    }

    pub fn with_final(mut self, id: impl Into<String>) -> Self {
        self.finals.push(StateId::new(id));
        self
    }

    pub fn state(&self, id: &str) -> Option<&StateSpec> {
        self.states.iter().find(|s| s.id.as_str() == id)
    }

    pub fn state_mut(&mut self, id: &str) -> Option<&mut StateSpec> {
        self.states.iter_mut().find(|s| s.id.as_str() == id)
    }

    pub fn is_final(&self, id: &str) -> bool {
        self.finals.iter().any(|f| f.as_str() == id)
    }

    pub fn state_ids(&self) -> impl Iterator<Item = &StateId> {
        self.states.iter().map(|s| &s.id)
    }

    /// Looks up a response template by name, falling back to the built-in
    /// `thought_action`, `thought_action_execute` and `action_only` contracts.
    pub fn template(&self, name: &str) -> Option<TemplateSpec> {
        self.templates
            .get(name)
            .cloned()
            .or_else(|| TemplateSpec::builtin(name))
    }
}

/// How an agent's context is assembled. Engine-wide override of the
/// per-agent setting.
pub use crate::output::Assembly;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    /// Cap on executed transitions (`M`). Must be at least 1.
    pub max_transitions: usize,
    pub record_trace: bool,
    pub seed: Option<u64>,
    /// When set, every agent uses this assembly mode.
    pub assembly_override: Option<Assembly>,
    /// Halt when the last three model responses are identical.
    pub halt_on_stall: bool,
    /// Halt once this many environment observations have been produced
    /// without the environment reporting completion.
    pub max_interactions: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            max_transitions: 30,
            record_trace: true,
            seed: None,
            assembly_override: None,
            halt_on_stall: false,
            max_interactions: None,
        }
    }
}

impl RunConfig {
    pub fn with_max_transitions(max_transitions: usize) -> Self {
        RunConfig {
            max_transitions,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum RunStatus {
    ReachedFinal,
    MaxTransitionsExceeded,
    OutputFunctionError,
    /// The model produced the same response three rounds in a row.
    Stalled,
    /// The environment interaction budget ran out.
    InteractionLimit,
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RunStatus::ReachedFinal => "ReachedFinal",
            RunStatus::MaxTransitionsExceeded => "MaxTransitionsExceeded",
            RunStatus::OutputFunctionError => "OutputFunctionError",
            RunStatus::Stalled => "Stalled",
            RunStatus::InteractionLimit => "InteractionLimit",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub exit_state: StateId,
    pub history: ContextHistory,
    pub status: RunStatus,
    pub transitions_taken: usize,
    pub trace: crate::trace::RunTrace,
    /// Every backend reply received during the run, in call order.
    pub replies: Vec<crate::backend::BackendReply>,
    /// Failure detail when `status` is `OutputFunctionError`.
    pub error: Option<String>,
    /// Values captured by agents during the run (e.g. the grounded target).
    pub variables: std::collections::BTreeMap<String, String>,
    /// States entered, in order, including the initial state.
    pub visited: Vec<StateId>,
}

impl RunResult {
    pub fn prompt_tokens(&self) -> u64 {
        self.replies.iter().map(|r| r.prompt_tokens).sum()
    }

    pub fn completion_tokens(&self) -> u64 {
        self.replies.iter().map(|r| r.completion_tokens).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn state_id_shape() {
        assert!(StateId::from("Init").is_well_formed());
        assert!(StateId::from("_pick_2").is_well_formed());
        assert!(!StateId::from("2pick").is_well_formed());
        assert!(!StateId::from("").is_well_formed());
        assert!(!StateId::from("go-to").is_well_formed());
    }

    #[test]
    fn last_of_kind() {
        let mk = |kind, content: &str, step| Message {
            kind,
            content: content.into(),
            producer: "p".into(),
            step,
            state: "S".into(),
        };
        let h: ContextHistory = vec![
            mk(MessageKind::Task, "q", 0),
            mk(MessageKind::Observation, "o1", 1),
            mk(MessageKind::ModelResponse, "r1", 2),
            mk(MessageKind::Observation, "o2", 2),
        ]
        .into_iter()
        .collect();
        assert_eq!(h.last_of(MessageKind::Observation).unwrap().content, "o2");
        assert_eq!(h.last_of(MessageKind::ModelResponse).unwrap().content, "r1");
        assert!(h.last_of(MessageKind::Prompt).is_none());
    }
}
