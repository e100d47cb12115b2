//! Dialogue normalisation, chunking, and the closed-loop tree update.

use std::fmt;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::client::ClientError;
use crate::gate::apply_ops;
use crate::listener::{build_ops_prompt, OpsListener};
use crate::ops::parse_op_list;
use crate::store::{StoreError, VersionStore};

pub const DEFAULT_CHUNK_WINDOW: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

impl Role {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "user" => Some(Role::User),
            "assistant" => Some(Role::Assistant),
            _ => None,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Role::User => "USER",
            Role::Assistant => "ASSISTANT",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::User => "user",
            Role::Assistant => "assistant",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueTurn {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ordinal: Option<u64>,
    pub role: Role,
    pub text: String,
}

impl DialogueTurn {
    pub fn new(role: Role, text: impl Into<String>) -> Self {
        Self {
            session_id: None,
            ordinal: None,
            role,
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueChunk {
    pub chunk_id: u64,
    pub turns: Vec<DialogueTurn>,
}

impl DialogueChunk {
    /// Transcript form used in prompts and as retrieval text.
    pub fn render(&self) -> String {
        render_turns(&self.turns)
    }

    /// Stable identity of the chunk's content, independent of its id.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.render().as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn char_len(&self) -> usize {
        self.render().chars().count()
    }
}

pub fn render_turns(turns: &[DialogueTurn]) -> String {
    turns
        .iter()
        .map(|t| format!("{}: {}", t.role.tag(), t.text))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum IngestError {
    #[error("line {line}: malformed record: {message}")]
    MalformedRecord { line: usize, message: String },
    #[error("line {line}: unknown role `{role}`")]
    UnknownRole { line: usize, role: String },
    #[error("line {line}: empty turn text")]
    EmptyText { line: usize },
    #[error("line {line}: ordinal {ordinal} does not increase within session `{session}`")]
    OrdinalOrder {
        line: usize,
        session: String,
        ordinal: u64,
    },
}

/// Parses a history document: either line-delimited JSON records
/// `{session_id, ordinal, role, text}` or a `USER:` / `ASSISTANT:` transcript.
pub fn normalize_history(source: &str) -> Result<Vec<DialogueTurn>, IngestError> {
    let first = source.lines().find(|l| !l.trim().is_empty());
    let turns = match first {
        None => return Ok(Vec::new()),
        Some(l) if l.trim_start().starts_with('{') => parse_records(source)?,
        Some(_) => parse_transcript(source)?,
    };
    Ok(turns)
}

fn parse_records(source: &str) -> Result<Vec<DialogueTurn>, IngestError> {
    use std::collections::HashMap;

    let mut turns = Vec::new();
    let mut last_ordinal: HashMap<String, u64> = HashMap::new();
    for (i, line) in source.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let malformed = |message: String| IngestError::MalformedRecord {
            line: line_no,
            message,
        };
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| malformed("record must be an object".into()))?;
        let role_text = match obj.get("role") {
            Some(serde_json::Value::String(s)) => s.clone(),
            Some(_) => return Err(malformed("`role` must be a string".into())),
            None => return Err(malformed("missing `role`".into())),
        };
        let role = Role::parse(&role_text).ok_or(IngestError::UnknownRole {
            line: line_no,
            role: role_text,
        })?;
        let text = match obj.get("text") {
            Some(serde_json::Value::String(s)) => s.clone(),
            Some(_) => return Err(malformed("`text` must be a string".into())),
            None => return Err(malformed("missing `text`".into())),
        };
        if text.trim().is_empty() {
            return Err(IngestError::EmptyText { line: line_no });
        }
        let session_id = match obj.get("session_id") {
            None | Some(serde_json::Value::Null) => None,
            Some(serde_json::Value::String(s)) => Some(s.clone()),
            Some(serde_json::Value::Number(n)) => Some(n.to_string()),
            Some(_) => return Err(malformed("`session_id` must be a string or number".into())),
        };
        let ordinal = match obj.get("ordinal") {
            None | Some(serde_json::Value::Null) => None,
            Some(v) => Some(
                v.as_u64()
                    .ok_or_else(|| malformed("`ordinal` must be a non-negative integer".into()))?,
            ),
        };
        for key in obj.keys() {
            if !matches!(key.as_str(), "role" | "text" | "session_id" | "ordinal") {
                return Err(malformed(format!("unknown field `{key}`")));
            }
        }
        if let Some(ord) = ordinal {
            let session = session_id.clone().unwrap_or_default();
            if let Some(prev) = last_ordinal.get(&session) {
                if ord <= *prev {
                    return Err(IngestError::OrdinalOrder {
                        line: line_no,
                        session,
                        ordinal: ord,
                    });
                }
            }
            last_ordinal.insert(session, ord);
        }
        turns.push(DialogueTurn {
            session_id,
            ordinal,
            role,
            text,
        });
    }
    Ok(turns)
}

fn split_tag(line: &str) -> Option<(Role, &str)> {
    let (head, rest) = line.split_once(':')?;
    // only bare role words count as tags
    if head.contains(char::is_whitespace) {
        return None;
    }
    Some((Role::parse(head)?, rest.trim()))
}

fn parse_transcript(source: &str) -> Result<Vec<DialogueTurn>, IngestError> {
    let mut turns: Vec<(usize, DialogueTurn)> = Vec::new();
    for (i, line) in source.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        match split_tag(line) {
            Some((role, rest)) => turns.push((line_no, DialogueTurn::new(role, rest))),
            None => match turns.last_mut() {
                Some((_, turn)) => {
                    if !turn.text.is_empty() {
                        turn.text.push('\n');
                    }
                    turn.text.push_str(line.trim());
                }
                None => {
                    return Err(IngestError::MalformedRecord {
                        line: line_no,
                        message: "text before the first USER:/ASSISTANT: tag".into(),
                    })
                }
            },
        }
    }
    turns
        .into_iter()
        .map(|(line, t)| {
            if t.text.trim().is_empty() {
                Err(IngestError::EmptyText { line })
            } else {
                Ok(t)
            }
        })
        .collect()
}

/// Greedy fixed windows of `w` turns with ids starting at 1.
pub fn chunk(turns: &[DialogueTurn], w: usize) -> Vec<DialogueChunk> {
    chunk_from(turns, w, 1)
}

/// As [`chunk`], numbering chunks from `first_id`.
pub fn chunk_from(turns: &[DialogueTurn], w: usize, first_id: u64) -> Vec<DialogueChunk> {
    assert!(w >= 1, "chunk window must be positive");
    turns
        .chunks(w)
        .zip(first_id..)
        .map(|(window, chunk_id)| DialogueChunk {
            chunk_id,
            turns: window.to_vec(),
        })
        .collect()
}

/// Buffers live turns and releases them once `threshold` have accumulated.
#[derive(Debug, Clone)]
pub struct TurnBuffer {
    threshold: usize,
    pending: Vec<DialogueTurn>,
}

impl TurnBuffer {
    pub fn new(threshold: usize) -> Self {
        assert!(threshold >= 1);
        Self {
            threshold,
            pending: Vec::new(),
        }
    }

    pub fn push(&mut self, turn: DialogueTurn) -> Option<Vec<DialogueTurn>> {
        self.pending.push(turn);
        if self.pending.len() >= self.threshold {
            Some(std::mem::take(&mut self.pending))
        } else {
            None
        }
    }

    pub fn flush(&mut self) -> Option<Vec<DialogueTurn>> {
        if self.pending.is_empty() {
            None
        } else {
            Some(std::mem::take(&mut self.pending))
        }
    }

    pub fn pending(&self) -> &[DialogueTurn] {
        &self.pending
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        Self {
            max_retries: 0,
            base_delay: Duration::ZERO,
        }
    }

    fn delay(&self, attempt: u32) -> Duration {
        self.base_delay * 2u32.saturating_pow(attempt)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EvolveStep {
    pub chunk_id: u64,
    pub version_id: u64,
    pub attempts: u32,
    pub parsed_ops: usize,
    pub skipped_lines: usize,
    pub applied: usize,
    pub rejected: usize,
    pub truncated: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize)]
pub struct EvolveOutcome {
    pub head: u64,
    pub steps: Vec<EvolveStep>,
    pub skipped_chunks: usize,
}

#[derive(Debug, Error)]
pub enum EvolveError {
    #[error("listener failed on chunk {chunk_id} after {attempts} attempt(s): {source}; head remains at version {head}")]
    Listener {
        chunk_id: u64,
        attempts: u32,
        head: u64,
        #[source]
        source: ClientError,
    },
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// Runs state construction, operation generation, gated execution and
/// persistence for each chunk in order.
///
/// Chunks whose id is not above the last committed chunk id are skipped, so a
/// run interrupted after `k` chunks can be restarted with the same input.
pub fn evolve(
    store: &mut VersionStore,
    listener: &dyn OpsListener,
    chunks: &[DialogueChunk],
    retry: RetryPolicy,
) -> Result<EvolveOutcome, EvolveError> {
    let mut outcome = EvolveOutcome {
        head: store.head_id(),
        ..EvolveOutcome::default()
    };
    let gate = store.gate_config().clone();
    for chunk in chunks {
        if store
            .last_chunk_id()
            .is_some_and(|last| chunk.chunk_id <= last)
        {
            outcome.skipped_chunks += 1;
            continue;
        }
        let parent = store.head_id();
        let tree = store.head_tree()?;
        let prompt = build_ops_prompt(&tree.to_prompt_compact(), chunk);

        let mut attempts = 0;
        let completion = loop {
            attempts += 1;
            match listener.generate_ops(&prompt) {
                Ok(text) => break text,
                Err(err) if err.is_retryable() && attempts <= retry.max_retries => {
                    log::warn!(
                        "listener attempt {attempts} on chunk {} failed: {err}",
                        chunk.chunk_id
                    );
                    thread::sleep(retry.delay(attempts - 1));
                }
                Err(source) => {
                    return Err(EvolveError::Listener {
                        chunk_id: chunk.chunk_id,
                        attempts,
                        head: parent,
                        source,
                    })
                }
            }
        };

        let (ops, diags) = parse_op_list(&completion);
        let (next, report) = apply_ops(&tree, &ops, &gate);
        let version_id = store.commit(parent, &next, &ops, &report, Some(chunk.chunk_id))?;
        outcome.steps.push(EvolveStep {
            chunk_id: chunk.chunk_id,
            version_id,
            attempts,
            parsed_ops: ops.len(),
            skipped_lines: diags.skipped_count(),
            applied: report.applied.len(),
            rejected: report.rejected.len(),
            truncated: report.truncated.len(),
        });
        outcome.head = version_id;
    }
    Ok(outcome)
}
