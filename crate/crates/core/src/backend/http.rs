//! Chat-completions client for any provider speaking the common
//! `/chat/completions` request/response shape.

use std::time::Duration;

use serde::Deserialize;
use serde_json::json;

use super::{estimate_tokens, BackendError, BackendReply, LlmBackend, PromptPayload, Role};

pub const ENV_API_KEY: &str = "STATEFLOW_API_KEY";
pub const ENV_API_BASE: &str = "STATEFLOW_API_BASE";
pub const ENV_MODEL: &str = "STATEFLOW_MODEL";

const DEFAULT_API_BASE: &str = "https://api.openai.com/v1";

#[derive(Debug, Clone)]
pub struct HttpConfig {
    pub api_base: String,
    pub api_key: Option<String>,
    pub model: String,
    /// Waits between attempts on rate limiting or 5xx; one retry per entry.
    pub backoff: Vec<Duration>,
    pub timeout: Duration,
}

impl HttpConfig {
    pub fn new(api_base: impl Into<String>, model: impl Into<String>) -> Self {
        HttpConfig {
            api_base: api_base.into(),
            api_key: None,
            model: model.into(),
            backoff: vec![
                Duration::from_secs(1),
                Duration::from_secs(2),
                Duration::from_secs(4),
            ],
            timeout: Duration::from_secs(120),
        }
    }

    /// Reads `STATEFLOW_API_BASE`, `STATEFLOW_API_KEY` and `STATEFLOW_MODEL`.
    /// An explicit model overrides the environment.
    pub fn from_env(model: Option<&str>) -> Result<Self, BackendError> {
        let base = std::env::var(ENV_API_BASE).unwrap_or_else(|_| DEFAULT_API_BASE.to_string());
        let model = match model {
            Some(m) => m.to_string(),
            None => std::env::var(ENV_MODEL)
                .map_err(|_| BackendError::Config(format!("{ENV_MODEL} is not set")))?,
        };
        let mut config = HttpConfig::new(base, model);
        config.api_key = std::env::var(ENV_API_KEY).ok();
        Ok(config)
    }
}

pub struct HttpBackend {
    config: HttpConfig,
    agent: ureq::Agent,
}

#[derive(Deserialize)]
struct CompletionResponse {
    choices: Vec<Choice>,
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct Choice {
    message: ChoiceMessage,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    content: Option<String>,
}

#[derive(Deserialize)]
struct Usage {
    prompt_tokens: u64,
    completion_tokens: u64,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(config.timeout))
            .build()
            .into();
        HttpBackend { config, agent }
    }

    fn request_body(&self, payload: &PromptPayload) -> serde_json::Value {
        let mut messages = Vec::new();
        if let Some(system) = &payload.system {
            messages.push(json!({"role": "system", "content": system}));
        }
        for turn in &payload.turns {
            let role = match turn.role {
                Role::User => "user",
                Role::Assistant => "assistant",
            };
            messages.push(json!({"role": role, "content": turn.content}));
        }
        let model = payload
            .params
            .model
            .clone()
            .unwrap_or_else(|| self.config.model.clone());
        let mut body = json!({
            "model": model,
            "messages": messages,
            "temperature": payload.params.temperature,
        });
        if let Some(max) = payload.params.max_output_tokens {
            body["max_tokens"] = json!(max);
        }
        body
    }

    fn attempt(&self, body: &serde_json::Value) -> Result<Attempt, BackendError> {
        let url = format!("{}/chat/completions", self.config.api_base.trim_end_matches('/'));
        let mut request = self.agent.post(&url).header("Content-Type", "application/json");
        if let Some(key) = &self.config.api_key {
            request = request.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = match request.send_json(body) {
            Ok(r) => r,
            Err(e) => return Ok(Attempt::Retryable(e.to_string())),
        };
        let status = response.status().as_u16();
        let text = response
            .body_mut()
            .read_to_string()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        match status {
            200..=299 => Ok(Attempt::Done(text)),
            401 | 403 => Err(BackendError::Auth(text)),
            429 | 500..=599 => Ok(Attempt::Retryable(format!("HTTP {status}"))),
            _ => Err(BackendError::MalformedResponse(format!("HTTP {status}: {text}"))),
        }
    }
}

enum Attempt {
    Done(String),
    Retryable(String),
}

impl LlmBackend for HttpBackend {
    fn model(&self) -> &str {
        &self.config.model
    }

    fn complete(&mut self, payload: &PromptPayload) -> Result<BackendReply, BackendError> {
        let body = self.request_body(payload);
        let mut attempts = 0u32;
        let text = loop {
            attempts += 1;
            match self.attempt(&body)? {
                Attempt::Done(text) => break text,
                Attempt::Retryable(_) if (attempts as usize) <= self.config.backoff.len() => {
                    std::thread::sleep(self.config.backoff[attempts as usize - 1]);
                }
                Attempt::Retryable(reason) if reason == "HTTP 429" => {
                    return Err(BackendError::RateLimited { attempts })
                }
                Attempt::Retryable(reason) => {
                    return Err(BackendError::Transport(format!("{reason} after {attempts} attempts")))
                }
            }
        };
        let parsed: CompletionResponse = serde_json::from_str(&text)
            .map_err(|e| BackendError::MalformedResponse(e.to_string()))?;
        let content = parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| BackendError::MalformedResponse("no choices in response".into()))?;
        let model = self.config.model.clone();
        let reply = match parsed.usage {
            Some(u) => BackendReply {
                content,
                prompt_tokens: u.prompt_tokens,
                completion_tokens: u.completion_tokens,
                model,
                estimated: false,
            },
            None => BackendReply {
                prompt_tokens: estimate_tokens(&payload.flattened()),
                completion_tokens: estimate_tokens(&content),
                content,
                model,
                estimated: true,
            },
        };
        Ok(reply)
    }
}
