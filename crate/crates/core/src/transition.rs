//! The transition function: per-state ordered rule tables evaluated against
//! the context history, first match wins, with a mandatory default.

use std::collections::BTreeMap;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendReply, PromptPayload, Turn};
use crate::flow::{ContextHistory, MessageKind, StateId, StateSpec};
use crate::output::{render_transcript, OutputBindings};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JudgeSpec {
    pub instruction: String,
    pub candidates: Vec<StateId>,
    pub backend: String,
    pub fallback: StateId,
}

/// A condition over the history. Text predicates may use `{name}`
/// placeholders, filled from run variables (and `task_type`) at decision
/// time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Predicate {
    Contains(String),
    Regex(String),
    LastObservationSuccess,
    LastObservationError,
    TaskTypeIs(String),
    /// Asks a model which candidate to move to. The rule always fires: the
    /// parsed candidate (or the fallback) is the destination.
    LlmJudge(JudgeSpec),
    /// Conjunction of non-judge predicates.
    All(Vec<Predicate>),
    /// The environment reported the task finished.
    EnvironmentDone,
}

impl Predicate {
    pub fn contains(text: impl Into<String>) -> Self {
        Predicate::Contains(text.into())
    }

    pub fn regex(pattern: impl Into<String>) -> Self {
        Predicate::Regex(pattern.into())
    }

    /// Every regex pattern in this predicate, including nested ones.
    pub fn regex_patterns(&self) -> Vec<&str> {
        match self {
            Predicate::Regex(p) => vec![p.as_str()],
            Predicate::All(parts) => parts.iter().flat_map(|p| p.regex_patterns()).collect(),
            _ => vec![],
        }
    }

    pub fn judge(&self) -> Option<&JudgeSpec> {
        match self {
            Predicate::LlmJudge(j) => Some(j),
            _ => None,
        }
    }

    pub fn has_nested_judge(&self) -> bool {
        match self {
            Predicate::All(parts) => parts
                .iter()
                .any(|p| matches!(p, Predicate::LlmJudge(_)) || p.has_nested_judge()),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Scope {
    #[default]
    LastMessage,
    LastObservation,
    LastModelResponse,
    WholeHistory,
}

fn is_default_scope(s: &Scope) -> bool {
    *s == Scope::LastMessage
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransitionRule {
    pub when: Predicate,
    #[serde(default, skip_serializing_if = "is_default_scope")]
    pub scope: Scope,
    pub target: StateId,
}

impl TransitionRule {
    pub fn new(when: Predicate, target: impl Into<String>) -> Self {
        TransitionRule {
            when,
            scope: Scope::LastMessage,
            target: StateId::new(target),
        }
    }

    pub fn scoped(mut self, scope: Scope) -> Self {
        self.scope = scope;
        self
    }

    /// States this rule can lead to.
    pub fn targets(&self) -> Vec<&StateId> {
        match &self.when {
            Predicate::LlmJudge(j) => {
                let mut out: Vec<&StateId> = j.candidates.iter().collect();
                out.push(&self.target);
                out.push(&j.fallback);
                out.sort();
                out.dedup();
                out
            }
            _ => vec![&self.target],
        }
    }
}

/// Run-scoped facts transitions may depend on besides the history.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunScope {
    pub task_type: Option<String>,
    pub vars: BTreeMap<String, String>,
    pub env_done: bool,
}

impl RunScope {
    fn lookup(&self, name: &str) -> Option<&str> {
        match name {
            "task_type" => self.task_type.as_deref(),
            _ => self.vars.get(name).map(String::as_str),
        }
    }

    /// Replaces `{name}` for every known name; unknown placeholders are left
    /// untouched.
    pub fn substitute(&self, text: &str, escape: bool) -> String {
        placeholder_regex()
            .replace_all(text, |caps: &regex::Captures<'_>| match self.lookup(&caps[1]) {
                Some(v) if escape => regex::escape(v),
                Some(v) => v.to_string(),
                None => caps[0].to_string(),
            })
            .into_owned()
    }
}

fn placeholder_regex() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{([A-Za-z_][A-Za-z0-9_]*)\}").expect("valid"))
}

/// Compiles a rule pattern with every placeholder replaced by a literal, to
/// check it independently of run variables.
pub fn check_pattern(pattern: &str) -> Result<(), regex::Error> {
    Regex::new(&placeholder_regex().replace_all(pattern, "x")).map(|_| ())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObservationClass {
    Success,
    Error,
}

/// Error iff any marker is a (case-sensitive) substring.
pub fn classify_observation(content: &str, markers: &[String]) -> ObservationClass {
    if markers.iter().any(|m| !m.is_empty() && content.contains(m.as_str())) {
        ObservationClass::Error
    } else {
        ObservationClass::Success
    }
}

/// Which part of the rule table produced a transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Via {
    Rule(usize),
    Default,
    Judge(usize),
}

impl Serialize for Via {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Via::Rule(i) => s.serialize_u64(*i as u64),
            Via::Default => s.serialize_str("default"),
            Via::Judge(i) => s.serialize_str(&format!("judge:{i}")),
        }
    }
}

impl<'de> Deserialize<'de> for Via {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr {
            Index(usize),
            Text(String),
        }
        match Repr::deserialize(d)? {
            Repr::Index(i) => Ok(Via::Rule(i)),
            Repr::Text(t) if t == "default" => Ok(Via::Default),
            Repr::Text(t) => t
                .strip_prefix("judge:")
                .and_then(|n| n.parse().ok())
                .map(Via::Judge)
                .ok_or_else(|| serde::de::Error::custom(format!("invalid transition source `{t}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    pub target: StateId,
    pub via: Via,
    /// Reply of the judge call, if one was made.
    pub judge_reply: Option<BackendReply>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DecideError {
    #[error("state `{0}` has no matching rule and no default")]
    NoTransition(String),
}

fn scoped_text(history: &ContextHistory, scope: Scope) -> Option<String> {
    match scope {
        Scope::LastMessage => history.last().map(|m| m.content.clone()),
        Scope::LastObservation => history.last_of(MessageKind::Observation).map(|m| m.content.clone()),
        Scope::LastModelResponse => history.last_of(MessageKind::ModelResponse).map(|m| m.content.clone()),
        Scope::WholeHistory => Some(
            history
                .iter()
                .map(|m| m.content.as_str())
                .collect::<Vec<_>>()
                .join("\n"),
        ),
    }
}

/// Evaluates a non-judge predicate. Scopes that select nothing make text
/// predicates false; an invalid regex never matches.
pub fn holds(
    predicate: &Predicate,
    scope: Scope,
    history: &ContextHistory,
    run: &RunScope,
    markers: &[String],
) -> bool {
    let last_obs_class = || {
        history
            .last_of(MessageKind::Observation)
            .map(|m| classify_observation(&m.content, markers))
    };
    match predicate {
        Predicate::Contains(text) => {
            let needle = run.substitute(text, false);
            scoped_text(history, scope).is_some_and(|t| t.contains(&needle))
        }
        Predicate::Regex(pattern) => {
            let Ok(re) = Regex::new(&run.substitute(pattern, true)) else {
                return false;
            };
            scoped_text(history, scope).is_some_and(|t| re.is_match(&t))
        }
        Predicate::LastObservationSuccess => last_obs_class() == Some(ObservationClass::Success),
        Predicate::LastObservationError => last_obs_class() == Some(ObservationClass::Error),
        Predicate::TaskTypeIs(tag) => run.task_type.as_deref() == Some(tag.as_str()),
        Predicate::EnvironmentDone => run.env_done,
        Predicate::All(parts) => parts.iter().all(|p| holds(p, scope, history, run, markers)),
        Predicate::LlmJudge(_) => false,
    }
}

/// Finds the single candidate named in a judge reply (word-boundary match).
pub fn parse_judge_reply(reply: &str, candidates: &[StateId]) -> Option<StateId> {
    let found: Vec<&StateId> = candidates
        .iter()
        .filter(|c| {
            Regex::new(&format!(r"\b{}\b", regex::escape(c.as_str())))
                .map(|re| re.is_match(reply))
                .unwrap_or(false)
        })
        .collect();
    match found.as_slice() {
        [one] => Some((*one).clone()),
        _ => None,
    }
}

fn run_judge(
    judge: &JudgeSpec,
    history: &ContextHistory,
    bindings: &mut OutputBindings,
) -> (StateId, Option<BackendReply>) {
    let Some(backend) = bindings.backends.get_mut(&judge.backend) else {
        return (judge.fallback.clone(), None);
    };
    let names: Vec<&str> = judge.candidates.iter().map(|c| c.as_str()).collect();
    let payload = PromptPayload {
        system: Some(judge.instruction.clone()),
        turns: vec![Turn::user(format!(
            "{}\nAnswer with exactly one of: {}",
            render_transcript(history),
            names.join(", ")
        ))],
        params: Default::default(),
    };
    match backend.complete(&payload) {
        Ok(reply) => {
            let target = parse_judge_reply(&reply.content, &judge.candidates)
                .unwrap_or_else(|| judge.fallback.clone());
            (target, Some(reply))
        }
        Err(_) => (judge.fallback.clone(), None),
    }
}

/// Picks the next state: the target of the first rule that holds, else the
/// state's default.
pub fn decide(
    state: &StateSpec,
    history: &ContextHistory,
    bindings: &mut OutputBindings,
    run: &RunScope,
    markers: &[String],
) -> Result<Decision, DecideError> {
    for (i, rule) in state.rules.iter().enumerate() {
        if let Predicate::LlmJudge(judge) = &rule.when {
            let (target, judge_reply) = run_judge(judge, history, bindings);
            return Ok(Decision {
                target,
                via: Via::Judge(i),
                judge_reply,
            });
        }
        if holds(&rule.when, rule.scope, history, run, markers) {
            return Ok(Decision {
                target: rule.target.clone(),
                via: Via::Rule(i),
                judge_reply: None,
            });
        }
    }
    state
        .default
        .clone()
        .map(|target| Decision {
            target,
            via: Via::Default,
            judge_reply: None,
        })
        .ok_or_else(|| DecideError::NoTransition(state.id.to_string()))
}
