//! Client for OpenAI-compatible `/chat/completions` endpoints.

use std::time::Duration;

use async_trait::async_trait;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::client::{GenerationClient, GenerationError, GenerationRequest};

pub const ENV_URL: &str = "MMDRIVE_GEN_URL";
pub const ENV_MODEL: &str = "MMDRIVE_GEN_MODEL";
pub const ENV_TOKEN: &str = "MMDRIVE_GEN_TOKEN";

/// Exponential backoff: wait `base_delay * factor^(k-1)` after failed
/// attempt `k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_millis(500),
            factor: 2.0,
        }
    }
}

impl RetryPolicy {
    /// Delay after the given 1-based failed attempt.
    pub fn delay_after(&self, attempt: u32) -> Duration {
        self.base_delay.mul_f64(self.factor.powi(attempt.saturating_sub(1) as i32))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    /// Base URL up to and including the API version, e.g.
    /// `https://host/v1`; `/chat/completions` is appended.
    pub base_url: String,
    pub model: String,
    pub token: Option<String>,
    pub timeout: Duration,
    pub retry: RetryPolicy,
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            token: None,
            timeout: Duration::from_secs(60),
            retry: RetryPolicy::default(),
        }
    }

    /// Reads `MMDRIVE_GEN_URL`, `MMDRIVE_GEN_MODEL` and the optional
    /// `MMDRIVE_GEN_TOKEN`.
    pub fn from_env() -> Result<Self, GenerationError> {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        let url = var(ENV_URL).ok_or_else(|| GenerationError::Config(format!("{ENV_URL} is not set")))?;
        let model = var(ENV_MODEL).ok_or_else(|| GenerationError::Config(format!("{ENV_MODEL} is not set")))?;
        let mut cfg = Self::new(url, model);
        cfg.token = var(ENV_TOKEN);
        Ok(cfg)
    }

    pub fn completions_url(&self) -> String {
        format!("{}/chat/completions", self.base_url.trim_end_matches('/'))
    }
}

fn image_mime(bytes: &[u8]) -> &'static str {
    if bytes.starts_with(&[0x89, b'P', b'N', b'G']) {
        "image/png"
    } else if bytes.starts_with(&[0xFF, 0xD8, 0xFF]) {
        "image/jpeg"
    } else if bytes.starts_with(b"RIFF") && bytes.get(8..12) == Some(b"WEBP") {
        "image/webp"
    } else {
        "application/octet-stream"
    }
}

/// Request body: a single user message, with an `image_url` data-URI part
/// when the request carries image bytes.
pub fn request_body(model: &str, request: &GenerationRequest) -> Value {
    let content = match &request.image {
        None => Value::String(request.prompt.clone()),
        Some(bytes) => {
            let b64 = base64::engine::general_purpose::STANDARD.encode(bytes);
            json!([
                {"type": "text", "text": request.prompt},
                {"type": "image_url", "image_url": {"url": format!("data:{};base64,{b64}", image_mime(bytes))}},
            ])
        }
    };
    json!({
        "model": model,
        "messages": [{"role": "user", "content": content}],
    })
}

/// Content of the first choice's message.
pub fn parse_response(body: &str) -> Result<String, GenerationError> {
    let v: Value = serde_json::from_str(body)
        .map_err(|e| GenerationError::Protocol(format!("response is not JSON: {e}")))?;
    let content = v
        .pointer("/choices/0/message/content")
        .ok_or_else(|| GenerationError::Protocol("response has no choices[0].message.content".into()))?;
    match content {
        Value::String(s) => Ok(s.clone()),
        // some servers return content parts even for text
        Value::Array(parts) => {
            let text: String = parts
                .iter()
                .filter_map(|p| p.get("text").and_then(Value::as_str))
                .collect();
            Ok(text)
        }
        other => Err(GenerationError::Protocol(format!("unexpected content type: {other}"))),
    }
}

pub struct HttpClient {
    config: EndpointConfig,
    http: reqwest::Client,
}

enum Attempt {
    Done(String),
    Retry { status: Option<u16>, message: String },
    Fatal(GenerationError),
}

impl HttpClient {
    pub fn new(config: EndpointConfig) -> Result<Self, GenerationError> {
        if config.retry.max_attempts == 0 {
            return Err(GenerationError::Config("retry policy needs at least one attempt".into()));
        }
        let http = reqwest::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| GenerationError::Config(format!("cannot build HTTP client: {e}")))?;
        Ok(Self { config, http })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    async fn attempt(&self, body: &Value) -> Attempt {
        let mut req = self.http.post(self.config.completions_url()).json(body);
        if let Some(token) = &self.config.token {
            req = req.bearer_auth(token);
        }
        let resp = match req.send().await {
            Ok(r) => r,
            Err(e) => {
                return Attempt::Retry {
                    status: None,
                    message: if e.is_timeout() { format!("timed out: {e}") } else { e.to_string() },
                }
            }
        };
        let status = resp.status();
        let text = match resp.text().await {
            Ok(t) => t,
            Err(e) => {
                return Attempt::Retry {
                    status: Some(status.as_u16()),
                    message: format!("reading body: {e}"),
                }
            }
        };
        if status.is_server_error() {
            return Attempt::Retry {
                status: Some(status.as_u16()),
                message: truncate(&text),
            };
        }
        if !status.is_success() {
            return Attempt::Fatal(GenerationError::Transport {
                status: Some(status.as_u16()),
                attempts: 0,
                message: truncate(&text),
            });
        }
        match parse_response(&text) {
            Ok(s) => Attempt::Done(s),
            Err(e) => Attempt::Fatal(e),
        }
    }
}

fn truncate(s: &str) -> String {
    const MAX: usize = 512;
    match s.char_indices().nth(MAX) {
        Some((i, _)) => format!("{}...", &s[..i]),
        None => s.to_string(),
    }
}

#[async_trait]
impl GenerationClient for HttpClient {
    fn id(&self) -> String {
        self.config.model.clone()
    }

    async fn generate(&self, request: &GenerationRequest) -> Result<String, GenerationError> {
        let body = request_body(&self.config.model, request);
        let policy = self.config.retry;
        let mut attempt = 1;
        loop {
            match self.attempt(&body).await {
                Attempt::Done(s) => return Ok(s),
                Attempt::Fatal(GenerationError::Transport { status, message, .. }) => {
                    return Err(GenerationError::Transport {
                        status,
                        attempts: attempt,
                        message,
                    })
                }
                Attempt::Fatal(e) => return Err(e),
                Attempt::Retry { status, message } => {
                    if attempt >= policy.max_attempts {
                        return Err(GenerationError::Transport {
                            status,
                            attempts: attempt,
                            message,
                        });
                    }
                    tokio::time::sleep(policy.delay_after(attempt)).await;
                    attempt += 1;
                }
            }
        }
    }
}
