//! Model backends: the call abstraction, token accounting and cost.

mod http;
mod scripted;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::{HttpBackend, HttpConfig, ENV_API_BASE, ENV_API_KEY, ENV_MODEL};
pub use scripted::{Script, ScriptEntry, ScriptMatch, ScriptedBackend, SCRIPT_EXHAUSTED};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub content: String,
}

impl Turn {
    pub fn user(content: impl Into<String>) -> Self {
        Turn {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Turn {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallParams {
    pub temperature: f64,
    pub max_output_tokens: Option<u32>,
    pub model: Option<String>,
}

impl Default for CallParams {
    fn default() -> Self {
        CallParams {
            temperature: 0.0,
            max_output_tokens: None,
            model: None,
        }
    }
}

/// What a backend is called with. A single user turn (completion style) is
/// legal; roles need not alternate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptPayload {
    pub system: Option<String>,
    pub turns: Vec<Turn>,
    #[serde(default)]
    pub params: CallParams,
}

impl PromptPayload {
    /// All payload text joined, used for script matching and token estimates.
    pub fn flattened(&self) -> String {
        let mut out = String::new();
        if let Some(system) = &self.system {
            out.push_str(system);
            out.push('\n');
        }
        for turn in &self.turns {
            out.push_str(&turn.content);
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendReply {
    pub content: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    /// Model that produced the reply, used to price it.
    pub model: String,
    /// Token counts came from the whitespace estimator, not the provider.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub estimated: bool,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("authentication rejected: {0}")]
    Auth(String),
    #[error("rate limited after {attempts} attempts")]
    RateLimited { attempts: u32 },
    #[error("malformed provider response: {0}")]
    MalformedResponse(String),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("backend misconfigured: {0}")]
    Config(String),
}

/// A model that turns a prompt payload into a reply.
pub trait LlmBackend: Send {
    fn model(&self) -> &str;
    fn complete(&mut self, payload: &PromptPayload) -> Result<BackendReply, BackendError>;
}

/// Approximate token count: whitespace-separated words. Only used where a
/// provider or script does not report usage.
pub fn estimate_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelPrice {
    pub prompt_price_per_1k: f64,
    pub completion_price_per_1k: f64,
}

/// Per-model prices in dollars per thousand tokens.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PricingTable {
    pub models: BTreeMap<String, ModelPrice>,
}

#[derive(Debug, Error)]
pub enum PricingError {
    #[error("no price configured for model `{0}`")]
    UnknownModel(String),
    #[error("negative price for model `{0}`")]
    NegativePrice(String),
    #[error("cannot read pricing file {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("invalid pricing file: {0}")]
    Parse(#[from] serde_json::Error),
}

impl PricingTable {
    pub fn with_model(mut self, model: impl Into<String>, prompt: f64, completion: f64) -> Self {
        self.models.insert(
            model.into(),
            ModelPrice {
                prompt_price_per_1k: prompt,
                completion_price_per_1k: completion,
            },
        );
        self
    }

    pub fn from_json(text: &str) -> Result<Self, PricingError> {
        let table: PricingTable = serde_json::from_str(text)?;
        for (model, price) in &table.models {
            if price.prompt_price_per_1k < 0.0 || price.completion_price_per_1k < 0.0 {
                return Err(PricingError::NegativePrice(model.clone()));
            }
        }
        Ok(table)
    }

    pub fn load(path: &Path) -> Result<Self, PricingError> {
        let text = std::fs::read_to_string(path).map_err(|source| PricingError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn price(&self, model: &str) -> Result<&ModelPrice, PricingError> {
        self.models
            .get(model)
            .ok_or_else(|| PricingError::UnknownModel(model.to_string()))
    }
}

/// Dollar cost of a set of replies, all priced as `model`.
pub fn accumulate_cost(
    tally: &[BackendReply],
    pricing: &PricingTable,
    model: &str,
) -> Result<f64, PricingError> {
    let price = pricing.price(model)?;
    Ok(tally
        .iter()
        .map(|r| token_cost(price, r.prompt_tokens, r.completion_tokens))
        .sum())
}

pub fn token_cost(price: &ModelPrice, prompt_tokens: u64, completion_tokens: u64) -> f64 {
    prompt_tokens as f64 / 1000.0 * price.prompt_price_per_1k
        + completion_tokens as f64 / 1000.0 * price.completion_price_per_1k
}

/// Cost of replies priced by the model each reply reports.
pub fn cost_by_reply_model(
    tally: &[BackendReply],
    pricing: &PricingTable,
) -> Result<f64, PricingError> {
    let mut total = 0.0;
    for reply in tally {
        let price = pricing.price(&reply.model)?;
        total += token_cost(price, reply.prompt_tokens, reply.completion_tokens);
    }
    Ok(total)
}
