//! HTTP clients for chat-completions style generators and scalar reward endpoints.
//!
//! Wire formats are documented in `docs/wire-formats.md`.

use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracing::{debug, warn};

use super::{
    BackendError, ChatModel, Generator, GeneratorRequest, RewardModel, RewardRequest, RewardScore,
};
use crate::stages::{render_staged, TagSchema};

pub const GENERATOR_SYSTEM_PROMPT: &str = "Answer the question in four stages, each wrapped in its tags: <SUMMARY>...</SUMMARY>, <CAPTION>...</CAPTION>, <REASONING>...</REASONING>, <CONCLUSION>...</CONCLUSION>.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    pub base_url: String,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub api_key_env: Option<String>,
    pub model: String,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub retries: u32,
    /// Sleep before retry i is `backoff_secs[i]`; the last entry repeats.
    #[serde(default = "default_backoff")]
    pub backoff_secs: Vec<f64>,
}

fn default_timeout() -> f64 {
    120.0
}

fn default_retries() -> u32 {
    2
}

fn default_backoff() -> Vec<f64> {
    vec![1.0, 4.0]
}

impl EndpointConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        EndpointConfig {
            base_url: base_url.into(),
            api_key_env: None,
            model: model.into(),
            timeout_secs: default_timeout(),
            retries: default_retries(),
            backoff_secs: default_backoff(),
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(BackendError::Config("timeout_secs must be > 0".into()));
        }
        if self.backoff_secs.iter().any(|b| !(*b >= 0.0 && b.is_finite())) {
            return Err(BackendError::Config("backoff_secs must be >= 0".into()));
        }
        if self.base_url.trim().is_empty() {
            return Err(BackendError::Config("base_url is empty".into()));
        }
        Ok(())
    }

    fn backoff(&self, retry: usize) -> Duration {
        let secs = self
            .backoff_secs
            .get(retry)
            .or(self.backoff_secs.last())
            .copied()
            .unwrap_or(0.0);
        Duration::from_secs_f64(secs)
    }
}

/// Shared POST-with-retries client.
#[derive(Debug, Clone)]
struct JsonClient {
    config: EndpointConfig,
    token: Option<String>,
    client: reqwest::blocking::Client,
}

enum Failure {
    Retryable(String),
    Fatal(BackendError),
}

impl JsonClient {
    fn new(config: EndpointConfig) -> Result<Self, BackendError> {
        config.validate()?;
        let token = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                BackendError::Config(format!("environment variable {var} is not set"))
            })?),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(JsonClient {
            config,
            token,
            client,
        })
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.config.base_url.trim_end_matches('/'), path)
    }

    fn attempt(&self, url: &str, body: &Value) -> Result<Value, Failure> {
        let mut req = self.client.post(url).json(body);
        if let Some(token) = &self.token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| Failure::Retryable(e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(Failure::Retryable(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let text = resp.text().unwrap_or_default();
            return Err(Failure::Fatal(BackendError::Transport {
                attempts: 1,
                message: format!("HTTP {status}: {text}"),
            }));
        }
        resp.json::<Value>()
            .map_err(|e| Failure::Fatal(BackendError::MalformedReply(e.to_string())))
    }

    /// Posts `body`, retrying transport failures exactly `retries` times.
    fn post(&self, path: &str, body: &Value) -> Result<Value, BackendError> {
        let url = self.url(path);
        let attempts = self.config.retries + 1;
        let mut last = String::new();
        for attempt in 0..attempts {
            if attempt > 0 {
                thread::sleep(self.config.backoff(attempt as usize - 1));
            }
            match self.attempt(&url, body) {
                Ok(v) => return Ok(v),
                Err(Failure::Fatal(BackendError::Transport { message, .. })) => {
                    return Err(BackendError::Transport {
                        attempts: attempt + 1,
                        message,
                    })
                }
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Retryable(msg)) => {
                    warn!(%url, attempt, "request failed: {msg}");
                    last = msg;
                }
            }
        }
        Err(BackendError::Transport {
            attempts,
            message: last,
        })
    }
}

/// Generator speaking the chat-completions protocol at `{base_url}/chat/completions`.
#[derive(Debug, Clone)]
pub struct HttpGenerator {
    client: JsonClient,
    schema: TagSchema,
}

impl HttpGenerator {
    pub fn new(config: EndpointConfig) -> Result<Self, BackendError> {
        Ok(HttpGenerator {
            client: JsonClient::new(config)?,
            schema: TagSchema::default(),
        })
    }

    pub fn with_schema(mut self, schema: TagSchema) -> Self {
        self.schema = schema;
        self
    }

    /// Request body for one stage generation.
    pub fn request_body(&self, req: &GeneratorRequest) -> Value {
        let mut prefix = render_staged(&req.prior_stages, &self.schema);
        if !prefix.is_empty() {
            prefix.push('\n');
        }
        prefix.push_str(self.schema.open(req.target_stage));
        let mut body = json!({
            "model": self.client.config.model,
            "messages": [
                {"role": "system", "content": GENERATOR_SYSTEM_PROMPT},
                {"role": "user", "content": user_content(&req.question, req.image_ref.as_deref())},
                {"role": "assistant", "content": prefix},
            ],
            "stop": req.sampling.stop,
            "temperature": req.sampling.temperature,
            "max_tokens": req.sampling.max_new_tokens,
        });
        if let Some(seed) = req.seed {
            body["seed"] = json!(seed);
        }
        body
    }
}

fn user_content(question: &str, image_ref: Option<&str>) -> Value {
    match image_ref {
        None => Value::String(question.to_string()),
        Some(url) => json!([
            {"type": "text", "text": question},
            {"type": "image_url", "image_url": {"url": url}},
        ]),
    }
}

/// Extracts the first choice's text from a chat-completions reply.
pub fn reply_text(reply: &Value) -> Result<String, BackendError> {
    let choice = reply
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| BackendError::MalformedReply("reply has no choices".into()))?;
    choice
        .pointer("/message/content")
        .or_else(|| choice.get("text"))
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| BackendError::MalformedReply("first choice has no text".into()))
}

/// Cuts `text` at the first occurrence of `stop`, dropping the marker.
fn truncate_at_stop(text: &str, stop: &str) -> String {
    match text.find(stop) {
        Some(i) if !stop.is_empty() => text[..i].to_string(),
        _ => text.to_string(),
    }
}

impl Generator for HttpGenerator {
    fn generate(&self, req: &GeneratorRequest) -> Result<String, BackendError> {
        req.validate()?;
        let body = self.request_body(req);
        debug!(stage = %req.target_stage, "generator request");
        let reply = self.client.post("/chat/completions", &body)?;
        Ok(truncate_at_stop(&reply_text(&reply)?, &req.sampling.stop))
    }
}

impl ChatModel for HttpGenerator {
    fn complete(&self, system: &str, user: &str) -> Result<String, BackendError> {
        let body = json!({
            "model": self.client.config.model,
            "messages": [
                {"role": "system", "content": system},
                {"role": "user", "content": user},
            ],
        });
        let reply = self.client.post("/chat/completions", &body)?;
        reply_text(&reply)
    }
}

/// Reward endpoint at `{base_url}/score` returning `{"score": <number>}`.
#[derive(Debug, Clone)]
pub struct HttpReward {
    client: JsonClient,
    schema: TagSchema,
}

impl HttpReward {
    pub fn new(config: EndpointConfig) -> Result<Self, BackendError> {
        Ok(HttpReward {
            client: JsonClient::new(config)?,
            schema: TagSchema::default(),
        })
    }

    pub fn with_schema(mut self, schema: TagSchema) -> Self {
        self.schema = schema;
        self
    }

    pub fn request_body(&self, req: &RewardRequest) -> Value {
        let mut body = json!({
            "model": self.client.config.model,
            "question": req.question,
            "response": render_staged(&req.trajectory, &self.schema),
        });
        if let Some(image) = &req.image_ref {
            body["image_ref"] = json!(image);
        }
        body
    }
}

impl RewardModel for HttpReward {
    fn score(&self, req: &RewardRequest) -> Result<RewardScore, BackendError> {
        req.validate()?;
        let reply = self.client.post("/score", &self.request_body(req))?;
        let value = reply
            .get("score")
            .and_then(Value::as_f64)
            .ok_or_else(|| BackendError::MalformedReply(format!("no numeric score in {reply}")))?;
        RewardScore::new(value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reply_text_variants() {
        let chat = json!({"choices": [{"message": {"content": "hi"}}]});
        assert_eq!(reply_text(&chat).unwrap(), "hi");
        let legacy = json!({"choices": [{"text": "yo"}]});
        assert_eq!(reply_text(&legacy).unwrap(), "yo");
        assert!(reply_text(&json!({"choices": []})).is_err());
        assert!(reply_text(&json!({"choices": [{"message": {}}]})).is_err());
    }

    #[test]
    fn truncation() {
        assert_eq!(truncate_at_stop("abc</CAPTION>junk", "</CAPTION>"), "abc");
        assert_eq!(truncate_at_stop("abc", "</CAPTION>"), "abc");
    }

    #[test]
    fn backoff_schedule_repeats_last() {
        let cfg = EndpointConfig::new("http://x", "m");
        assert_eq!(cfg.backoff(0), Duration::from_secs(1));
        assert_eq!(cfg.backoff(1), Duration::from_secs(4));
        assert_eq!(cfg.backoff(5), Duration::from_secs(4));
    }

    #[test]
    fn config_validation() {
        let mut cfg = EndpointConfig::new("http://x", "m");
        cfg.timeout_secs = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = EndpointConfig::new("http://x", "m");
        cfg.api_key_env = Some("RETRACE_TEST_SURELY_UNSET_VAR".into());
        assert!(matches!(HttpGenerator::new(cfg), Err(BackendError::Config(_))));
    }
}
