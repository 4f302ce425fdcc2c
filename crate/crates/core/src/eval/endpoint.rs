//! Chat-completions client for scoring hosted models with the same harness.
//!
//! Sends `{model, messages, temperature, top_p, max_tokens}` to
//! `/v1/chat/completions` and returns the first choice's message content.
//! Server errors and timeouts retry with exponential backoff; client errors
//! never retry; 401/403 surface as auth failures. A counting gate caps the
//! number of in-flight requests at `max_parallel`.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rollout::{Completer, CompleterError, DecodeMode, DecodingConfig};

#[derive(Debug, Error)]
pub enum EndpointError {
    #[error("invalid endpoint config: {0}")]
    Config(String),
    #[error("auth token env var {0} is not set")]
    MissingToken(String),
    #[error("authentication failed with http status {status}")]
    Auth { status: u16 },
    #[error("request rejected with http status {status}")]
    Client { status: u16 },
    #[error("response body is not a chat completion: {0}")]
    MalformedResponse(String),
    #[error("gave up after {attempts} attempts; last error: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("transport error: {0}")]
    Transport(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_attempts: 3, initial_backoff: Duration::from_millis(200) }
    }
}

#[derive(Debug, Clone)]
pub struct EndpointConfig {
    pub base_url: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token, if any.
    pub auth_env: Option<String>,
    pub timeout: Duration,
    pub max_parallel: usize,
    pub retry: RetryPolicy,
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> EndpointConfig {
        EndpointConfig {
            base_url: base_url.into(),
            model: model.into(),
            auth_env: None,
            timeout: Duration::from_secs(30),
            max_parallel: 4,
            retry: RetryPolicy::default(),
        }
    }

    pub fn validate(&self) -> Result<(), EndpointError> {
        if self.max_parallel == 0 {
            return Err(EndpointError::Config("max_parallel must be >= 1".into()));
        }
        if self.timeout.is_zero() {
            return Err(EndpointError::Config("timeout must be > 0".into()));
        }
        if self.retry.max_attempts == 0 {
            return Err(EndpointError::Config("max_attempts must be >= 1".into()));
        }
        if self.base_url.is_empty() {
            return Err(EndpointError::Config("base_url is empty".into()));
        }
        Ok(())
    }
}

/// Counting gate bounding concurrent requests.
struct Gate {
    slots: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    fn new(n: usize) -> Gate {
        Gate { slots: Mutex::new(n), cv: Condvar::new() }
    }

    fn acquire(&self) -> GateGuard<'_> {
        let mut slots = self.slots.lock().unwrap();
        while *slots == 0 {
            slots = self.cv.wait(slots).unwrap();
        }
        *slots -= 1;
        GateGuard { gate: self }
    }
}

struct GateGuard<'a> {
    gate: &'a Gate,
}

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        *self.gate.slots.lock().unwrap() += 1;
        self.gate.cv.notify_one();
    }
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: Vec<ChatMessage<'a>>,
    temperature: f64,
    top_p: f64,
    max_tokens: usize,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatResponseMessage,
}

#[derive(Deserialize)]
struct ChatResponseMessage {
    content: Option<String>,
}

pub struct EndpointClient {
    cfg: EndpointConfig,
    token: Option<String>,
    http: reqwest::blocking::Client,
    gate: Gate,
}

impl EndpointClient {
    pub fn new(cfg: EndpointConfig) -> Result<EndpointClient, EndpointError> {
        cfg.validate()?;
        let token = match &cfg.auth_env {
            None => None,
            Some(var) => Some(
                std::env::var(var).map_err(|_| EndpointError::MissingToken(var.clone()))?,
            ),
        };
        let http = reqwest::blocking::Client::builder()
            .timeout(cfg.timeout)
            .build()
            .map_err(|e| EndpointError::Transport(e.to_string()))?;
        let gate = Gate::new(cfg.max_parallel);
        Ok(EndpointClient { cfg, token, http, gate })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.cfg
    }

    /// One chat completion with retries. Greedy decoding maps to temperature
    /// 0 on the wire.
    pub fn query(&self, prompt: &str, decoding: &DecodingConfig) -> Result<String, EndpointError> {
        let _slot = self.gate.acquire();
        let (temperature, top_p) = match decoding.mode {
            DecodeMode::Greedy => (0.0, 1.0),
            DecodeMode::Sampled => (decoding.temperature, decoding.top_p),
        };
        let body = ChatRequest {
            model: &self.cfg.model,
            messages: vec![ChatMessage { role: "user", content: prompt }],
            temperature,
            top_p,
            max_tokens: decoding.max_new_tokens,
        };
        let url = format!("{}/v1/chat/completions", self.cfg.base_url.trim_end_matches('/'));
        let mut last = String::new();
        for attempt in 1..=self.cfg.retry.max_attempts {
            if attempt > 1 {
                let backoff = self.cfg.retry.initial_backoff * 2u32.pow(attempt - 2);
                std::thread::sleep(backoff);
            }
            let mut req = self.http.post(&url).json(&body);
            if let Some(token) = &self.token {
                req = req.bearer_auth(token);
            }
            match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        let parsed: ChatResponse = resp
                            .json()
                            .map_err(|e| EndpointError::MalformedResponse(e.to_string()))?;
                        return parsed
                            .choices
                            .into_iter()
                            .next()
                            .and_then(|c| c.message.content)
                            .ok_or_else(|| {
                                EndpointError::MalformedResponse(
                                    "no choices with message content".into(),
                                )
                            });
                    }
                    if status.as_u16() == 401 || status.as_u16() == 403 {
                        return Err(EndpointError::Auth { status: status.as_u16() });
                    }
                    if status.is_client_error() {
                        return Err(EndpointError::Client { status: status.as_u16() });
                    }
                    last = format!("http status {status}");
                    log::debug!("endpoint attempt {attempt} failed: {last}");
                }
                Err(e) => {
                    last = e.to_string();
                    log::debug!("endpoint attempt {attempt} failed: {last}");
                }
            }
        }
        Err(EndpointError::RetriesExhausted { attempts: self.cfg.retry.max_attempts, last })
    }
}

impl Completer for EndpointClient {
    fn complete(&self, prompt: &str, cfg: &DecodingConfig) -> Result<String, CompleterError> {
        self.query(prompt, cfg).map_err(|e| CompleterError::Endpoint(e.to_string()))
    }
}
