//! Operation-list generation: prompt construction and the listener seat.

use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::client::{ChatClient, ChatRequest, ClientError};
use crate::ingest::DialogueChunk;

const OPS_TEMPLATE: &str = include_str!("../assets/ops_prompt.txt");
const SCHEMA_SLOT: &str = "{schema}";
const DIALOGUE_SLOT: &str = "{dialogue_text}";

/// Characters per token for model-agnostic estimates.
pub const CHARS_PER_TOKEN: usize = 4;

pub fn estimate_tokens(text: &str) -> usize {
    text.chars().count().div_ceil(CHARS_PER_TOKEN)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// One call maps (chunk, tree) straight to operations.
    #[default]
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ListenerConfig {
    pub endpoint: Option<String>,
    pub api_key: Option<String>,
    pub model: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    pub strategy: Strategy,
    pub timeout_secs: f64,
}

impl Default for ListenerConfig {
    fn default() -> Self {
        Self {
            endpoint: None,
            api_key: None,
            model: String::new(),
            temperature: 0.7,
            top_p: 0.9,
            max_tokens: 1024,
            strategy: Strategy::Direct,
            timeout_secs: 60.0,
        }
    }
}

impl ListenerConfig {
    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.timeout_secs)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpsPrompt {
    pub text: String,
    /// Estimate for the substituted inputs (tree state plus dialogue).
    pub input_tokens: usize,
    pub chunk_fingerprint: String,
}

/// Fills the operation-generation template. Pure in (tree_state, chunk).
pub fn build_ops_prompt(tree_state: &str, chunk: &DialogueChunk) -> OpsPrompt {
    let dialogue = chunk.render();
    let template = OPS_TEMPLATE.strip_suffix('\n').unwrap_or(OPS_TEMPLATE);
    let (head, rest) = template
        .split_once(SCHEMA_SLOT)
        .expect("template has a schema slot");
    let (middle, tail) = rest
        .split_once(DIALOGUE_SLOT)
        .expect("template has a dialogue slot");
    let mut text = String::with_capacity(template.len() + tree_state.len() + dialogue.len());
    text.push_str(head);
    text.push_str(tree_state.trim_end_matches('\n'));
    text.push_str(middle);
    text.push_str(&dialogue);
    text.push_str(tail);
    OpsPrompt {
        text,
        input_tokens: estimate_tokens(tree_state) + estimate_tokens(&dialogue),
        chunk_fingerprint: chunk.fingerprint(),
    }
}

pub trait OpsListener: Send + Sync {
    /// Raw completion text; parsing happens downstream.
    fn generate_ops(&self, prompt: &OpsPrompt) -> Result<String, ClientError>;
}

/// Listener backed by a chat-completion client.
pub struct ChatListener<C> {
    client: C,
    config: ListenerConfig,
}

impl<C: ChatClient> ChatListener<C> {
    pub fn new(client: C, config: ListenerConfig) -> Self {
        Self { client, config }
    }
}

impl<C: ChatClient> OpsListener for ChatListener<C> {
    fn generate_ops(&self, prompt: &OpsPrompt) -> Result<String, ClientError> {
        let request = ChatRequest {
            prompt: prompt.text.clone(),
            temperature: Some(self.config.temperature),
            top_p: Some(self.config.top_p),
            max_tokens: Some(self.config.max_tokens),
        };
        self.client.complete(&request)
    }
}

/// Canned completions keyed by chunk fingerprint. The script file is a JSON
/// object `{"<fingerprint>": "<completion>", ...}`; the key `"*"` is an
/// optional fallback.
#[derive(Debug, Default)]
pub struct ScriptedListener {
    replies: HashMap<String, String>,
    fallback: Option<String>,
    calls: AtomicUsize,
}

impl ScriptedListener {
    pub fn new(replies: HashMap<String, String>) -> Self {
        Self {
            replies,
            ..Self::default()
        }
    }

    pub fn always(reply: impl Into<String>) -> Self {
        Self {
            fallback: Some(reply.into()),
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let mut replies: HashMap<String, String> = serde_json::from_str(text)?;
        let fallback = replies.remove("*");
        Ok(Self {
            replies,
            fallback,
            calls: AtomicUsize::new(0),
        })
    }

    pub fn insert(&mut self, fingerprint: impl Into<String>, reply: impl Into<String>) {
        self.replies.insert(fingerprint.into(), reply.into());
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn covers(&self, fingerprint: &str) -> bool {
        self.fallback.is_some() || self.replies.contains_key(fingerprint)
    }
}

impl OpsListener for ScriptedListener {
    fn generate_ops(&self, prompt: &OpsPrompt) -> Result<String, ClientError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.replies
            .get(&prompt.chunk_fingerprint)
            .or(self.fallback.as_ref())
            .cloned()
            .ok_or_else(|| ClientError::MockMiss(format!("chunk {}", prompt.chunk_fingerprint)))
    }
}
