//! Chat-completion clients: an HTTP client for any endpoint speaking the
//! de-facto `/chat/completions` contract, plus deterministic test doubles.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::Serialize;
use serde_json::json;
use thiserror::Error;

pub const ENV_ENDPOINT: &str = "MEMTREE_LLM_ENDPOINT";
pub const ENV_API_KEY: &str = "MEMTREE_LLM_API_KEY";
pub const ENV_MODEL: &str = "MEMTREE_LLM_MODEL";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClientError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("request timed out")]
    Timeout,
    #[error("HTTP status {code}: {body}")]
    Status { code: u16, body: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("no scripted reply for {0}")]
    MockMiss(String),
    #[error("no model endpoint configured")]
    NotConfigured,
}

impl ClientError {
    pub fn is_retryable(&self) -> bool {
        match self {
            ClientError::Transport(_) | ClientError::Timeout => true,
            ClientError::Status { code, .. } => *code == 429 || *code >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChatRequest {
    pub prompt: String,
    pub temperature: Option<f64>,
    pub top_p: Option<f64>,
    pub max_tokens: Option<u32>,
}

impl ChatRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            temperature: None,
            top_p: None,
            max_tokens: None,
        }
    }
}

pub trait ChatClient: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, ClientError>;
}

impl<C: ChatClient + ?Sized> ChatClient for &C {
    fn complete(&self, request: &ChatRequest) -> Result<String, ClientError> {
        (**self).complete(request)
    }
}

impl<C: ChatClient + ?Sized> ChatClient for Box<C> {
    fn complete(&self, request: &ChatRequest) -> Result<String, ClientError> {
        (**self).complete(request)
    }
}

/// Blocking client for `POST {endpoint}/chat/completions`.
pub struct HttpChatClient {
    url: String,
    api_key: Option<String>,
    model: String,
    agent: ureq::Agent,
}

impl HttpChatClient {
    pub fn new(endpoint: &str, api_key: Option<String>, model: &str, timeout: Duration) -> Self {
        let trimmed = endpoint.trim_end_matches('/');
        let url = if trimmed.ends_with("/chat/completions") {
            trimmed.to_string()
        } else {
            format!("{trimmed}/chat/completions")
        };
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            url,
            api_key: api_key.filter(|k| !k.is_empty()),
            model: model.to_string(),
            agent,
        }
    }

    /// Reads endpoint, key and model from the `MEMTREE_LLM_*` variables.
    pub fn from_env(timeout: Duration) -> Result<Self, ClientError> {
        let endpoint = std::env::var(ENV_ENDPOINT).map_err(|_| ClientError::NotConfigured)?;
        let model = std::env::var(ENV_MODEL).unwrap_or_default();
        Ok(Self::new(
            &endpoint,
            std::env::var(ENV_API_KEY).ok(),
            &model,
            timeout,
        ))
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    pub fn request_body(&self, request: &ChatRequest) -> serde_json::Value {
        let mut body = json!({
            "model": self.model,
            "messages": [{"role": "user", "content": request.prompt}],
        });
        let obj = body.as_object_mut().expect("object literal");
        if let Some(t) = request.temperature {
            obj.insert("temperature".into(), json!(t));
        }
        if let Some(p) = request.top_p {
            obj.insert("top_p".into(), json!(p));
        }
        if let Some(m) = request.max_tokens {
            obj.insert("max_tokens".into(), json!(m));
        }
        body
    }
}

/// Extracts `choices[0].message.content` from a chat-completions response.
pub fn parse_completion(body: &str) -> Result<String, ClientError> {
    let value: serde_json::Value =
        serde_json::from_str(body).map_err(|e| ClientError::Malformed(e.to_string()))?;
    value
        .pointer("/choices/0/message/content")
        .and_then(|c| c.as_str())
        .map(str::to_string)
        .ok_or_else(|| ClientError::Malformed("missing choices[0].message.content".into()))
}

impl ChatClient for HttpChatClient {
    fn complete(&self, request: &ChatRequest) -> Result<String, ClientError> {
        let body = self.request_body(request).to_string();
        let mut req = self
            .agent
            .post(&self.url)
            .header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut response = req.send(body.as_str()).map_err(map_ureq)?;
        let code = response.status().as_u16();
        let text = response.body_mut().read_to_string().map_err(map_ureq)?;
        if !(200..300).contains(&code) {
            return Err(ClientError::Status { code, body: text });
        }
        parse_completion(&text)
    }
}

fn map_ureq(err: ureq::Error) -> ClientError {
    match err {
        ureq::Error::Timeout(_) => ClientError::Timeout,
        ureq::Error::StatusCode(code) => ClientError::Status {
            code,
            body: String::new(),
        },
        other => ClientError::Transport(other.to_string()),
    }
}

/// Replies by substring rules: the first rule whose needle occurs in the
/// prompt wins, else the default reply, else [`ClientError::MockMiss`].
#[derive(Debug, Default)]
pub struct MockChatClient {
    rules: Vec<(String, String)>,
    default: Option<String>,
    failure: Option<ClientError>,
    calls: AtomicUsize,
    prompts: Mutex<Vec<String>>,
}

impl MockChatClient {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn fixed(reply: impl Into<String>) -> Self {
        Self::new().with_default(reply)
    }

    /// Every call fails with `err`.
    pub fn failing(err: ClientError) -> Self {
        Self {
            failure: Some(err),
            ..Self::default()
        }
    }

    pub fn with_rule(mut self, needle: impl Into<String>, reply: impl Into<String>) -> Self {
        self.rules.push((needle.into(), reply.into()));
        self
    }

    pub fn with_default(mut self, reply: impl Into<String>) -> Self {
        self.default = Some(reply.into());
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn prompts(&self) -> Vec<String> {
        self.prompts.lock().expect("mock lock").clone()
    }
}

impl ChatClient for MockChatClient {
    fn complete(&self, request: &ChatRequest) -> Result<String, ClientError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.prompts
            .lock()
            .expect("mock lock")
            .push(request.prompt.clone());
        if let Some(err) = &self.failure {
            return Err(err.clone());
        }
        self.rules
            .iter()
            .find(|(needle, _)| request.prompt.contains(needle.as_str()))
            .map(|(_, reply)| reply.clone())
            .or_else(|| self.default.clone())
            .ok_or_else(|| {
                let head: String = request.prompt.chars().take(40).collect();
                ClientError::MockMiss(format!("prompt starting {head:?}"))
            })
    }
}

/// Adapts a closure into a client.
pub struct FnClient<F>(pub F);

impl<F> ChatClient for FnClient<F>
where
    F: Fn(&ChatRequest) -> Result<String, ClientError> + Send + Sync,
{
    fn complete(&self, request: &ChatRequest) -> Result<String, ClientError> {
        (self.0)(request)
    }
}
