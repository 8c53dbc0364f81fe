use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{estimate_tokens, BackendError, BackendReply, LlmBackend, PromptPayload};

/// Reply returned once every applicable script entry has been consumed.
pub const SCRIPT_EXHAUSTED: &str = "SCRIPT_EXHAUSTED";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScriptMatch {
    /// Consumed strictly in declaration order among the `Any` entries.
    Any,
    /// Fires on the first call whose payload contains the text.
    ContainsText(String),
    /// Fires on the n-th call (0-based) made to this backend.
    TurnIndex(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptEntry {
    #[serde(rename = "match")]
    pub matcher: ScriptMatch,
    pub reply: String,
    /// Declared (prompt, completion) token counts. When absent the counts are
    /// estimated from the payload and the reply and flagged as estimated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<(u64, u64)>,
}

impl ScriptEntry {
    pub fn any(reply: impl Into<String>, tokens: (u64, u64)) -> Self {
        ScriptEntry {
            matcher: ScriptMatch::Any,
            reply: reply.into(),
            tokens: Some(tokens),
        }
    }

    pub fn contains(needle: impl Into<String>, reply: impl Into<String>, tokens: (u64, u64)) -> Self {
        ScriptEntry {
            matcher: ScriptMatch::ContainsText(needle.into()),
            reply: reply.into(),
            tokens: Some(tokens),
        }
    }
}

/// The `scripts/*.json` document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Script {
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
    pub entries: Vec<ScriptEntry>,
}

fn default_model() -> String {
    "scripted".to_string()
}

impl Script {
    pub fn new(entries: Vec<ScriptEntry>) -> Self {
        Script {
            model: default_model(),
            description: String::new(),
            entries,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))
    }
}

/// Deterministic backend replaying pre-authored replies.
///
/// On each call the unconsumed `ContainsText`/`TurnIndex` entries are tried
/// in declaration order; if none matches, the next unconsumed `Any` entry is
/// used. Every entry fires at most once.
#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    script: Arc<Script>,
    consumed: Vec<bool>,
    calls: usize,
}

impl ScriptedBackend {
    pub fn new(script: impl Into<Arc<Script>>) -> Self {
        let script = script.into();
        let consumed = vec![false; script.entries.len()];
        ScriptedBackend {
            script,
            consumed,
            calls: 0,
        }
    }

    pub fn from_replies<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::new(Script::new(
            replies
                .into_iter()
                .map(|r| ScriptEntry {
                    matcher: ScriptMatch::Any,
                    reply: r.into(),
                    tokens: None,
                })
                .collect(),
        ))
    }

    /// Number of entries consumed so far.
    pub fn cursor(&self) -> usize {
        self.consumed.iter().filter(|c| **c).count()
    }

    pub fn calls(&self) -> usize {
        self.calls
    }

    fn select(&self, flat: &str) -> Option<usize> {
        let entries = &self.script.entries;
        let specific = entries.iter().enumerate().find(|(i, e)| {
            !self.consumed[*i]
                && match &e.matcher {
                    ScriptMatch::ContainsText(t) => flat.contains(t.as_str()),
                    ScriptMatch::TurnIndex(n) => *n == self.calls,
                    ScriptMatch::Any => false,
                }
        });
        if let Some((i, _)) = specific {
            return Some(i);
        }
        entries
            .iter()
            .enumerate()
            .find(|(i, e)| !self.consumed[*i] && e.matcher == ScriptMatch::Any)
            .map(|(i, _)| i)
    }
}

impl LlmBackend for ScriptedBackend {
    fn model(&self) -> &str {
        &self.script.model
    }

    fn complete(&mut self, payload: &PromptPayload) -> Result<BackendReply, BackendError> {
        let flat = payload.flattened();
        let reply = match self.select(&flat) {
            Some(i) => {
                self.consumed[i] = true;
                let entry = &self.script.entries[i];
                let (prompt_tokens, completion_tokens, estimated) = match entry.tokens {
                    Some((p, c)) => (p, c, false),
                    None => (estimate_tokens(&flat), estimate_tokens(&entry.reply), true),
                };
                BackendReply {
                    content: entry.reply.clone(),
                    prompt_tokens,
                    completion_tokens,
                    model: self.script.model.clone(),
                    estimated,
                }
            }
            None => BackendReply {
                content: SCRIPT_EXHAUSTED.to_string(),
                prompt_tokens: 0,
                completion_tokens: 0,
                model: self.script.model.clone(),
                estimated: false,
            },
        };
        self.calls += 1;
        Ok(reply)
    }
}
