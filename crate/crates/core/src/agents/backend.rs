//! Chat-completion transports: an OpenAI-compatible HTTP client and a
//! fixture-replay mock.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::path::Path;
use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Rewrite,
    Design,
    Search,
    Eval,
    Code,
    Manager,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Rewrite => "rewrite",
            Stage::Design => "design",
            Stage::Search => "search",
            Stage::Eval => "eval",
            Stage::Code => "code",
            Stage::Manager => "manager",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ContentPart {
    Text(String),
    Png { label: String, bytes: Vec<u8> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatMessage {
    pub role: Role,
    pub parts: Vec<ContentPart>,
}

impl ChatMessage {
    pub fn text(role: Role, text: impl Into<String>) -> ChatMessage {
        ChatMessage {
            role,
            parts: vec![ContentPart::Text(text.into())],
        }
    }

    pub fn text_len(&self) -> usize {
        self.parts
            .iter()
            .map(|p| match p {
                ContentPart::Text(t) => t.chars().count(),
                ContentPart::Png { .. } => 0,
            })
            .sum()
    }

    pub fn image_count(&self) -> usize {
        self.parts.iter().filter(|p| matches!(p, ContentPart::Png { .. })).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChatRequest {
    pub stage: Stage,
    pub messages: Vec<ChatMessage>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub tokens_in: u64,
    pub tokens_out: u64,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BackendError {
    #[error("mock fixture has no more responses for stage {0}")]
    MockExhausted(Stage),
    #[error("mock fixture: {0}")]
    Fixture(String),
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed completion response: {0}")]
    Protocol(String),
}

pub trait ChatBackend {
    fn complete(&mut self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;
    /// Model id used for price lookup.
    fn model_id(&self) -> &str;
}

/// Rough token estimate: four characters per token, 85 per attached image.
pub fn estimate_tokens(chars: usize, images: usize) -> u64 {
    chars.div_ceil(4) as u64 + 85 * images as u64
}

pub fn request_tokens(request: &ChatRequest) -> u64 {
    let chars = request.messages.iter().map(ChatMessage::text_len).sum();
    let images = request.messages.iter().map(ChatMessage::image_count).sum();
    estimate_tokens(chars, images)
}

#[derive(Debug, Clone, Deserialize)]
struct FixtureLine {
    stage: Stage,
    content: String,
    #[serde(default)]
    tokens_in: Option<u64>,
    #[serde(default)]
    tokens_out: Option<u64>,
}

/// Replays responses from a JSON-lines fixture, first-in first-out per stage.
#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    queues: BTreeMap<Stage, VecDeque<FixtureLine>>,
    calls: Vec<Stage>,
}

impl MockBackend {
    pub fn from_jsonl(text: &str) -> Result<MockBackend, BackendError> {
        let mut queues: BTreeMap<Stage, VecDeque<FixtureLine>> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: FixtureLine = serde_json::from_str(line)
                .map_err(|e| BackendError::Fixture(format!("line {}: {e}", i + 1)))?;
            queues.entry(entry.stage).or_default().push_back(entry);
        }
        Ok(MockBackend {
            queues,
            calls: Vec::new(),
        })
    }

    pub fn from_file(path: &Path) -> Result<MockBackend, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Fixture(format!("{}: {e}", path.display())))?;
        MockBackend::from_jsonl(&text)
    }

    /// Adds one response at the back of a stage queue.
    pub fn push(&mut self, stage: Stage, content: impl Into<String>) {
        self.queues.entry(stage).or_default().push_back(FixtureLine {
            stage,
            content: content.into(),
            tokens_in: None,
            tokens_out: None,
        });
    }

    pub fn remaining(&self, stage: Stage) -> usize {
        self.queues.get(&stage).map_or(0, VecDeque::len)
    }

    /// Stages of the calls served so far.
    pub fn calls(&self) -> &[Stage] {
        &self.calls
    }
}

impl ChatBackend for MockBackend {
    fn complete(&mut self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        self.calls.push(request.stage);
        let entry = self
            .queues
            .get_mut(&request.stage)
            .and_then(VecDeque::pop_front)
            .ok_or(BackendError::MockExhausted(request.stage))?;
        let tokens_out = entry
            .tokens_out
            .unwrap_or_else(|| estimate_tokens(entry.content.chars().count(), 0));
        Ok(ChatResponse {
            tokens_in: entry.tokens_in.unwrap_or_else(|| request_tokens(request)),
            tokens_out,
            content: entry.content,
        })
    }

    fn model_id(&self) -> &str {
        "mock"
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HttpConfig {
    pub base_url: String,
    pub model: String,
    pub api_key: Option<String>,
    pub temperature: f64,
    /// Forwarded as the request `seed` when set.
    pub seed: Option<u64>,
    pub timeout: Duration,
    pub max_retries: u32,
    /// First retry delay; doubles per attempt.
    pub retry_backoff: Duration,
}

impl Default for HttpConfig {
    fn default() -> Self {
        HttpConfig {
            base_url: "https://api.openai.com/v1".into(),
            model: "gpt-4o".into(),
            api_key: None,
            temperature: 0.0,
            seed: None,
            timeout: Duration::from_secs(120),
            max_retries: 3,
            retry_backoff: Duration::from_millis(1000),
        }
    }
}

/// OpenAI-compatible `/chat/completions` client.
pub struct HttpBackend {
    config: HttpConfig,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<HttpBackend, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(config.timeout)
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(HttpBackend { config, client })
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }
}

/// Request body in the chat-completions format; images become base64 data
/// URLs.
pub fn request_body(model: &str, temperature: f64, request: &ChatRequest) -> Value {
    let messages: Vec<Value> = request
        .messages
        .iter()
        .map(|m| {
            let role = match m.role {
                Role::System => "system",
                Role::User => "user",
                Role::Assistant => "assistant",
            };
            let only_text = m.parts.iter().all(|p| matches!(p, ContentPart::Text(_)));
            if only_text {
                let text: String = m
                    .parts
                    .iter()
                    .map(|p| match p {
                        ContentPart::Text(t) => t.as_str(),
                        ContentPart::Png { .. } => "",
                    })
                    .collect::<Vec<_>>()
                    .join("\n");
                json!({"role": role, "content": text})
            } else {
                let parts: Vec<Value> = m
                    .parts
                    .iter()
                    .map(|p| match p {
                        ContentPart::Text(t) => json!({"type": "text", "text": t}),
                        ContentPart::Png { bytes, .. } => json!({
                            "type": "image_url",
                            "image_url": {"url": format!(
                                "data:image/png;base64,{}",
                                base64::engine::general_purpose::STANDARD.encode(bytes)
                            )}
                        }),
                    })
                    .collect();
                json!({"role": role, "content": parts})
            }
        })
        .collect();
    json!({"model": model, "temperature": temperature, "messages": messages})
}

fn parse_completion(body: &Value) -> Result<(String, Option<u64>, Option<u64>), BackendError> {
    let content = body
        .pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| BackendError::Protocol("missing choices[0].message.content".into()))?;
    let usage_in = body.pointer("/usage/prompt_tokens").and_then(Value::as_u64);
    let usage_out = body.pointer("/usage/completion_tokens").and_then(Value::as_u64);
    Ok((content.to_string(), usage_in, usage_out))
}

impl ChatBackend for HttpBackend {
    fn complete(&mut self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let mut body = request_body(&self.config.model, self.config.temperature, request);
        if let Some(seed) = self.config.seed {
            body["seed"] = json!(seed);
        }
        let mut attempt = 0;
        loop {
            let mut req = self.client.post(self.endpoint()).json(&body);
            if let Some(key) = &self.config.api_key {
                req = req.bearer_auth(key);
            }
            let outcome = match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    if status.is_success() {
                        let v: Value = resp.json().map_err(|e| BackendError::Protocol(e.to_string()))?;
                        let (content, tin, tout) = parse_completion(&v)?;
                        return Ok(ChatResponse {
                            tokens_in: tin.unwrap_or_else(|| request_tokens(request)),
                            tokens_out: tout.unwrap_or_else(|| estimate_tokens(content.chars().count(), 0)),
                            content,
                        });
                    }
                    let retryable = status.as_u16() == 429 || status.is_server_error();
                    let err = BackendError::Http {
                        status: status.as_u16(),
                        body: resp.text().unwrap_or_default().chars().take(500).collect(),
                    };
                    (err, retryable)
                }
                Err(e) => (BackendError::Transport(e.to_string()), true),
            };
            let (err, retryable) = outcome;
            if !retryable || attempt >= self.config.max_retries {
                return Err(err);
            }
            log::warn!("{} call failed ({err}); retrying", request.stage);
            std::thread::sleep(self.config.retry_backoff * 2u32.saturating_pow(attempt));
            attempt += 1;
        }
    }

    fn model_id(&self) -> &str {
        &self.config.model
    }
}

/// Request as recorded in transcripts: images reduced to digest and size.
pub fn transcript_messages(request: &ChatRequest) -> Value {
    Value::Array(
        request
            .messages
            .iter()
            .map(|m| {
                let parts: Vec<Value> = m
                    .parts
                    .iter()
                    .map(|p| match p {
                        ContentPart::Text(t) => json!({"type": "text", "text": t}),
                        ContentPart::Png { label, bytes } => json!({
                            "type": "image",
                            "label": label,
                            "bytes": bytes.len(),
                            "sha256": hex::encode(Sha256::digest(bytes)),
                        }),
                    })
                    .collect();
                json!({"role": m.role, "content": parts})
            })
            .collect(),
    )
}
