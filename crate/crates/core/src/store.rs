//! Append-only version log of tree states.
//!
//! A store directory holds:
//!
//! - `meta.json`: the schema document and gate configuration used for every
//!   apply, fixed at creation;
//! - `versions.jsonl`: one [`VersionRecord`] per line, version 0 first;
//! - `head.json`: a small index naming the head version, its digest and the
//!   log length it covers (the log wins on disagreement);
//! - `chunks.jsonl`: archived dialogue chunks, used for retrieval;
//! - `LOCK`: held by the single writer.
//!
//! Record field names are part of the on-disk format.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gate::{apply_ops, ApplyReport, GateConfig, ReportSummary};
use crate::ingest::DialogueChunk;
use crate::ops::{parse_op_line, render_op, MemOp};
use crate::path::NodePath;
use crate::schema::{Schema, SchemaError};
use crate::tree::{init_tree, PersonaTree, TreeDigest, TreeError};

const META_FILE: &str = "meta.json";
const LOG_FILE: &str = "versions.jsonl";
const HEAD_FILE: &str = "head.json";
const CHUNK_FILE: &str = "chunks.jsonl";
const LOCK_FILE: &str = "LOCK";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store io: {0}")]
    Io(#[from] io::Error),
    #[error("store already exists at {0}")]
    AlreadyExists(PathBuf),
    #[error("no store at {0}")]
    Missing(PathBuf),
    #[error("store is locked by another writer")]
    Locked,
    #[error("store opened read-only")]
    ReadOnly,
    #[error("corrupt store: {0}")]
    Corrupt(String),
    #[error("head moved: expected parent {expected}, head is {head}")]
    HeadMoved { expected: u64, head: u64 },
    #[error("record {version} rejected: {reason}")]
    InvalidRecord { version: u64, reason: String },
    #[error("no version {0}")]
    NotFound(u64),
    #[error("replay diverged at version {version}: {reason}")]
    ReplayMismatch { version: u64, reason: String },
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Tree(#[from] TreeError),
}

impl StoreError {
    /// Integrity failures, as opposed to I/O or usage errors.
    pub fn is_verification(&self) -> bool {
        matches!(
            self,
            StoreError::ReplayMismatch { .. }
                | StoreError::Corrupt(_)
                | StoreError::InvalidRecord { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VersionRecord {
    pub version_id: u64,
    pub parent_id: Option<u64>,
    pub chunk_id: Option<u64>,
    /// Parsed operations, rendered in the canonical grammar.
    pub ops: Vec<String>,
    pub report: ReportSummary,
    /// Canonical tree serialization.
    pub snapshot: String,
    pub digest: TreeDigest,
    /// RFC 3339 UTC; informational only.
    pub timestamp: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct StoreMeta {
    format: u32,
    schema: String,
    gate: GateConfig,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct HeadIndex {
    version_id: u64,
    digest: TreeDigest,
    log_bytes: u64,
}

/// One differing leaf between two trees.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeafChange {
    pub path: NodePath,
    pub before: Option<String>,
    pub after: Option<String>,
}

pub struct VersionStore {
    dir: PathBuf,
    schema: Arc<Schema>,
    gate: GateConfig,
    records: Vec<VersionRecord>,
    log_bytes: u64,
    lock: Option<File>,
    durable: bool,
}

fn now_utc() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

impl VersionStore {
    /// Creates a new store whose version 0 is `init_tree(schema)`.
    pub fn create(dir: &Path, schema: Arc<Schema>, gate: GateConfig) -> Result<Self, StoreError> {
        if dir.join(LOG_FILE).exists() {
            return Err(StoreError::AlreadyExists(dir.to_path_buf()));
        }
        gate.validate(&schema)
            .map_err(|e| StoreError::InvalidRecord {
                version: 0,
                reason: e.to_string(),
            })?;
        fs::create_dir_all(dir)?;
        let lock = acquire_lock(dir)?;
        let meta = StoreMeta {
            format: FORMAT_VERSION,
            schema: schema.to_json(),
            gate: gate.clone(),
        };
        write_atomic(
            &dir.join(META_FILE),
            serde_json::to_string_pretty(&meta)
                .expect("meta serializes")
                .as_bytes(),
        )?;
        File::create(dir.join(LOG_FILE))?;
        let mut store = Self {
            dir: dir.to_path_buf(),
            schema: schema.clone(),
            gate,
            records: Vec::new(),
            log_bytes: 0,
            lock: Some(lock),
            durable: true,
        };
        let t0 = init_tree(schema);
        let root = VersionRecord {
            version_id: 0,
            parent_id: None,
            chunk_id: None,
            ops: Vec::new(),
            report: ReportSummary::default(),
            snapshot: t0.to_canonical(),
            digest: t0.digest(),
            timestamp: now_utc(),
        };
        store.append_record(root)?;
        Ok(store)
    }

    /// Opens for writing, taking the advisory lock. A torn final record is dropped.
    pub fn open(dir: &Path) -> Result<Self, StoreError> {
        Self::open_inner(dir, true)
    }

    /// Opens without the lock; `commit` is refused.
    pub fn open_read_only(dir: &Path) -> Result<Self, StoreError> {
        Self::open_inner(dir, false)
    }

    fn open_inner(dir: &Path, writer: bool) -> Result<Self, StoreError> {
        let log_path = dir.join(LOG_FILE);
        if !log_path.exists() {
            return Err(StoreError::Missing(dir.to_path_buf()));
        }
        let lock = if writer {
            Some(acquire_lock(dir)?)
        } else {
            None
        };
        let meta: StoreMeta = serde_json::from_str(&fs::read_to_string(dir.join(META_FILE))?)
            .map_err(|e| StoreError::Corrupt(format!("{META_FILE}: {e}")))?;
        if meta.format != FORMAT_VERSION {
            return Err(StoreError::Corrupt(format!(
                "unsupported format {}",
                meta.format
            )));
        }
        let schema = Arc::new(Schema::from_json_with_max_depth(
            &meta.schema,
            meta.gate.max_depth.max(crate::schema::DEFAULT_MAX_DEPTH),
        )?);

        let bytes = fs::read(&log_path)?;
        let complete = match bytes.iter().rposition(|b| *b == b'\n') {
            Some(i) => i + 1,
            None => 0,
        };
        if complete < bytes.len() {
            log::warn!(
                "dropping torn final record ({} bytes) in {}",
                bytes.len() - complete,
                log_path.display()
            );
            if writer {
                OpenOptions::new()
                    .write(true)
                    .open(&log_path)?
                    .set_len(complete as u64)?;
            }
        }
        let text = std::str::from_utf8(&bytes[..complete])
            .map_err(|e| StoreError::Corrupt(format!("{LOG_FILE}: {e}")))?;
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let record: VersionRecord = serde_json::from_str(line)
                .map_err(|e| StoreError::Corrupt(format!("{LOG_FILE} line {}: {e}", i + 1)))?;
            check_link(&record, records.last())?;
            records.push(record);
        }
        let root = records
            .first()
            .ok_or_else(|| StoreError::Corrupt("log has no root record".into()))?;
        if root.digest != init_tree(schema.clone()).digest() {
            return Err(StoreError::Corrupt(
                "version 0 is not the initial tree".into(),
            ));
        }
        let store = Self {
            dir: dir.to_path_buf(),
            schema,
            gate: meta.gate,
            records,
            log_bytes: complete as u64,
            lock,
            durable: true,
        };
        if writer {
            store.write_head()?;
        }
        Ok(store)
    }

    /// Skips fsync on commit. Intended for tests and throwaway stores.
    pub fn set_durable(&mut self, durable: bool) {
        self.durable = durable;
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn schema(&self) -> &Arc<Schema> {
        &self.schema
    }

    pub fn gate_config(&self) -> &GateConfig {
        &self.gate
    }

    pub fn head_id(&self) -> u64 {
        self.records.last().expect("store has a root").version_id
    }

    pub fn head_record(&self) -> &VersionRecord {
        self.records.last().expect("store has a root")
    }

    pub fn records(&self) -> &[VersionRecord] {
        &self.records
    }

    pub fn record(&self, version: u64) -> Result<&VersionRecord, StoreError> {
        self.records
            .get(version as usize)
            .ok_or(StoreError::NotFound(version))
    }

    /// Highest chunk id committed so far.
    pub fn last_chunk_id(&self) -> Option<u64> {
        self.records.iter().rev().find_map(|r| r.chunk_id)
    }

    pub fn tree_at(&self, version: u64) -> Result<PersonaTree, StoreError> {
        let record = self.record(version)?;
        Ok(PersonaTree::from_canonical(
            self.schema.clone(),
            &record.snapshot,
            self.gate.extension_budget(),
        )?)
    }

    pub fn head_tree(&self) -> Result<PersonaTree, StoreError> {
        self.tree_at(self.head_id())
    }

    /// Appends the state produced from the current head. `expected_parent`
    /// must equal the head at the time of the call.
    pub fn commit(
        &mut self,
        expected_parent: u64,
        tree: &PersonaTree,
        ops: &[MemOp],
        report: &ApplyReport,
        chunk_id: Option<u64>,
    ) -> Result<u64, StoreError> {
        if self.lock.is_none() {
            return Err(StoreError::ReadOnly);
        }
        let head = self.head_id();
        if expected_parent != head {
            return Err(StoreError::HeadMoved {
                expected: expected_parent,
                head,
            });
        }
        let on_disk = fs::metadata(self.dir.join(LOG_FILE))?.len();
        if on_disk != self.log_bytes {
            return Err(StoreError::HeadMoved {
                expected: expected_parent,
                head,
            });
        }
        let record = VersionRecord {
            version_id: head + 1,
            parent_id: Some(head),
            chunk_id,
            ops: ops.iter().map(render_op).collect(),
            report: report.summary(),
            snapshot: tree.to_canonical(),
            digest: tree.digest(),
            timestamp: now_utc(),
        };
        self.append_record(record)
    }

    /// Validates and appends a fully formed record.
    pub fn append_record(&mut self, record: VersionRecord) -> Result<u64, StoreError> {
        if self.lock.is_none() {
            return Err(StoreError::ReadOnly);
        }
        check_link(&record, self.records.last())?;
        let tree = PersonaTree::from_canonical(
            self.schema.clone(),
            &record.snapshot,
            self.gate.extension_budget(),
        )
        .map_err(|e| StoreError::InvalidRecord {
            version: record.version_id,
            reason: format!("snapshot does not parse: {e}"),
        })?;
        if tree.digest() != record.digest {
            return Err(StoreError::InvalidRecord {
                version: record.version_id,
                reason: "digest does not match snapshot".into(),
            });
        }
        let mut line = serde_json::to_string(&record).expect("record serializes");
        line.push('\n');
        let mut file = OpenOptions::new()
            .append(true)
            .open(self.dir.join(LOG_FILE))?;
        file.write_all(line.as_bytes())?;
        if self.durable {
            file.sync_data()?;
        }
        self.log_bytes += line.len() as u64;
        let id = record.version_id;
        self.records.push(record);
        self.write_head()?;
        Ok(id)
    }

    fn write_head(&self) -> Result<(), StoreError> {
        let head = self.head_record();
        let index = HeadIndex {
            version_id: head.version_id,
            digest: head.digest.clone(),
            log_bytes: self.log_bytes,
        };
        write_atomic(
            &self.dir.join(HEAD_FILE),
            serde_json::to_string(&index)
                .expect("head serializes")
                .as_bytes(),
        )?;
        Ok(())
    }

    /// Rebuilds version `to` from the snapshot at `from` by re-applying each
    /// record's operations, checking every intermediate digest.
    pub fn replay(&self, from: u64, to: u64) -> Result<PersonaTree, StoreError> {
        if from > to {
            return Err(StoreError::InvalidRecord {
                version: from,
                reason: format!("replay range {from}..{to} is reversed"),
            });
        }
        self.record(to)?;
        let start = self.record(from)?;
        let mut tree = self.tree_at(from).map_err(|e| StoreError::ReplayMismatch {
            version: from,
            reason: e.to_string(),
        })?;
        if tree.digest() != start.digest {
            return Err(StoreError::ReplayMismatch {
                version: from,
                reason: "snapshot digest mismatch".into(),
            });
        }
        for version in from + 1..=to {
            let record = self.record(version)?;
            let mut ops = Vec::with_capacity(record.ops.len());
            for (i, line) in record.ops.iter().enumerate() {
                let op = parse_op_line(line).map_err(|why| StoreError::ReplayMismatch {
                    version,
                    reason: format!("op {} does not parse: {why}", i + 1),
                })?;
                ops.push(op);
            }
            tree = apply_ops(&tree, &ops, &self.gate).0;
            let digest = tree.digest();
            if digest != record.digest {
                return Err(StoreError::ReplayMismatch {
                    version,
                    reason: format!(
                        "expected digest {}, replay produced {digest}",
                        record.digest
                    ),
                });
            }
        }
        Ok(tree)
    }

    /// Checks every snapshot against its digest and replays the whole log.
    /// Returns the number of versions verified.
    pub fn verify(&self) -> Result<usize, StoreError> {
        for record in &self.records {
            let tree = self
                .tree_at(record.version_id)
                .map_err(|e| StoreError::ReplayMismatch {
                    version: record.version_id,
                    reason: e.to_string(),
                })?;
            if tree.digest() != record.digest {
                return Err(StoreError::ReplayMismatch {
                    version: record.version_id,
                    reason: "stored snapshot does not match its digest".into(),
                });
            }
        }
        self.replay(0, self.head_id())?;
        Ok(self.records.len())
    }

    /// Appends chunks not yet archived (by id).
    pub fn archive_chunks(&self, chunks: &[DialogueChunk]) -> Result<usize, StoreError> {
        let known: BTreeSet<u64> = self.archived_chunks()?.iter().map(|c| c.chunk_id).collect();
        let mut out = String::new();
        let mut added = 0;
        for chunk in chunks.iter().filter(|c| !known.contains(&c.chunk_id)) {
            out.push_str(&serde_json::to_string(chunk).expect("chunk serializes"));
            out.push('\n');
            added += 1;
        }
        if added > 0 {
            let mut file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(self.dir.join(CHUNK_FILE))?;
            file.write_all(out.as_bytes())?;
            if self.durable {
                file.sync_data()?;
            }
        }
        Ok(added)
    }

    /// Archived chunks ordered by id.
    pub fn archived_chunks(&self) -> Result<Vec<DialogueChunk>, StoreError> {
        let path = self.dir.join(CHUNK_FILE);
        if !path.exists() {
            return Ok(Vec::new());
        }
        let mut by_id = BTreeMap::new();
        for (i, line) in fs::read_to_string(&path)?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<DialogueChunk>(line) {
                Ok(chunk) => {
                    by_id.entry(chunk.chunk_id).or_insert(chunk);
                }
                Err(e) => {
                    log::warn!("skipping unreadable chunk archive line {}: {e}", i + 1);
                }
            }
        }
        Ok(by_id.into_values().collect())
    }
}

fn check_link(record: &VersionRecord, prev: Option<&VersionRecord>) -> Result<(), StoreError> {
    let expected_id = prev.map_or(0, |p| p.version_id + 1);
    let expected_parent = prev.map(|p| p.version_id);
    if record.version_id != expected_id {
        return Err(StoreError::InvalidRecord {
            version: record.version_id,
            reason: format!("expected version id {expected_id}"),
        });
    }
    if record.parent_id != expected_parent {
        return Err(StoreError::InvalidRecord {
            version: record.version_id,
            reason: format!(
                "parent {:?} does not chain to {:?}",
                record.parent_id, expected_parent
            ),
        });
    }
    Ok(())
}

fn acquire_lock(dir: &Path) -> Result<File, StoreError> {
    let file = OpenOptions::new()
        .create(true)
        .truncate(false)
        .write(true)
        .open(dir.join(LOCK_FILE))?;
    match file.try_lock() {
        Ok(()) => Ok(file),
        Err(fs::TryLockError::WouldBlock) => Err(StoreError::Locked),
        Err(fs::TryLockError::Error(e)) => Err(StoreError::Io(e)),
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(tmp, path)
}

/// Leaf-level differences, sorted by path. Extension leaves present on only
/// one side show `None` for the other.
pub fn diff(a: &PersonaTree, b: &PersonaTree) -> Vec<LeafChange> {
    let left: BTreeMap<NodePath, &str> =
        a.leaves().into_iter().map(|l| (l.path, l.value)).collect();
    let right: BTreeMap<NodePath, &str> =
        b.leaves().into_iter().map(|l| (l.path, l.value)).collect();
    let paths: BTreeSet<&NodePath> = left.keys().chain(right.keys()).collect();
    paths
        .into_iter()
        .filter_map(|path| {
            let before = left.get(path).copied();
            let after = right.get(path).copied();
            (before != after).then(|| LeafChange {
                path: path.clone(),
                before: before.map(str::to_string),
                after: after.map(str::to_string),
            })
        })
        .collect()
}
