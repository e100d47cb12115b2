//! Engine configuration: one typed surface over every module default.
//!
//! Sources are layered `defaults < file < environment < flags`. The file is
//! TOML with top-level keys `schema_path`, `store_path`, `chunk_w` and the
//! sections `[gate]`, `[listener]`, `[recall]`; see [`KEYS`] for the full
//! list. Environment variables are `MEMTREE_` plus the upper-cased key with
//! `.` replaced by `_` (e.g. `MEMTREE_RECALL_TOP_K`); the listener endpoint,
//! key and model also answer to `MEMTREE_LLM_ENDPOINT`, `MEMTREE_LLM_API_KEY`
//! and `MEMTREE_LLM_MODEL`. Flags are `key=value` strings. Unknown keys are an
//! error in every layer.

use std::path::{Path, PathBuf};

use serde::Serialize;
use thiserror::Error;

use crate::gate::{DeletionMode, GateConfig, SchemaPolicy};
use crate::listener::ListenerConfig;
use crate::recall::{ExpanderKind, RecallConfig, RecallMode, RouterKind, Schedule};

pub const ENV_PREFIX: &str = "MEMTREE_";
/// Environment variables with the prefix that are not configuration keys.
pub const ENV_RESERVED: &[&str] = &["MEMTREE_LOG", "MEMTREE_CONFIG"];
pub const DEFAULT_CHUNK_W: usize = 3;
pub const DEFAULT_STORE_PATH: &str = "memtree-store";
pub const DEFAULT_MARKER: &str = "[deleted]";
pub const DEFAULT_MAX_RETRIES: u32 = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Source {
    File,
    Env(String),
    Flag,
}

impl std::fmt::Display for Source {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Source::File => f.write_str("config file"),
            Source::Env(var) => write!(f, "environment variable {var}"),
            Source::Flag => f.write_str("command-line flag"),
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config syntax: {0}")]
    Syntax(String),
    #[error("unknown key {key:?} in {origin}")]
    UnknownKey { key: String, origin: Source },
    #[error("{key}: expected {expected}, got {found} (from {origin})")]
    Type {
        key: String,
        expected: &'static str,
        found: String,
        origin: Source,
    },
    #[error("{key}: {message}")]
    Invalid { key: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Text,
    OptText,
    Uint,
    OptUint,
    Float,
    Choice(&'static [&'static str]),
    TextList,
}

impl Kind {
    fn expected(self) -> &'static str {
        match self {
            Kind::Text => "a string",
            Kind::OptText => "a string (empty to unset)",
            Kind::Uint => "a non-negative integer",
            Kind::OptUint => "a non-negative integer or \"none\"",
            Kind::Float => "a number",
            Kind::Choice(_) => "one of the documented choices",
            Kind::TextList => "a list of strings",
        }
    }
}

/// A documented configuration key.
#[derive(Debug, Clone, Copy)]
pub struct KeySpec {
    pub key: &'static str,
    kind: Kind,
    pub doc: &'static str,
}

const POLICIES: &[&str] = &["strict", "extend"];
const DELETIONS: &[&str] = &["clear", "marker"];
const STRATEGIES: &[&str] = &["direct"];
const MODES: &[&str] = &["auto", "fast", "agentic"];
const ROUTERS: &[&str] = &["heuristic", "llm"];
const EXPANDERS: &[&str] = &["template", "llm"];
const SCHEDULES: &[&str] = &["concurrent", "sequential"];

pub const KEYS: &[KeySpec] = &[
    KeySpec {
        key: "schema_path",
        kind: Kind::OptText,
        doc: "schema document; empty for the built-in schema",
    },
    KeySpec {
        key: "store_path",
        kind: Kind::Text,
        doc: "version store directory",
    },
    KeySpec {
        key: "chunk_w",
        kind: Kind::Uint,
        doc: "turns per dialogue chunk (>= 1)",
    },
    KeySpec {
        key: "gate.schema_policy",
        kind: Kind::Choice(POLICIES),
        doc: "strict | extend",
    },
    KeySpec {
        key: "gate.deletion_mode",
        kind: Kind::Choice(DELETIONS),
        doc: "clear | marker",
    },
    KeySpec {
        key: "gate.deletion_marker",
        kind: Kind::Text,
        doc: "text written by DELETE in marker mode",
    },
    KeySpec {
        key: "gate.budget_override",
        kind: Kind::OptUint,
        doc: "cap on every leaf budget; budget of extension leaves",
    },
    KeySpec {
        key: "gate.max_depth",
        kind: Kind::Uint,
        doc: "deepest allowed leaf path",
    },
    KeySpec {
        key: "listener.endpoint",
        kind: Kind::OptText,
        doc: "chat-completions base URL",
    },
    KeySpec {
        key: "listener.api_key",
        kind: Kind::OptText,
        doc: "bearer token",
    },
    KeySpec {
        key: "listener.model",
        kind: Kind::Text,
        doc: "model name sent with each request",
    },
    KeySpec {
        key: "listener.temperature",
        kind: Kind::Float,
        doc: "sampling temperature",
    },
    KeySpec {
        key: "listener.top_p",
        kind: Kind::Float,
        doc: "nucleus sampling mass",
    },
    KeySpec {
        key: "listener.max_tokens",
        kind: Kind::Uint,
        doc: "completion token cap",
    },
    KeySpec {
        key: "listener.timeout_secs",
        kind: Kind::Float,
        doc: "per-request timeout",
    },
    KeySpec {
        key: "listener.max_retries",
        kind: Kind::Uint,
        doc: "retries on transient listener failures",
    },
    KeySpec {
        key: "listener.strategy",
        kind: Kind::Choice(STRATEGIES),
        doc: "direct",
    },
    KeySpec {
        key: "recall.mode",
        kind: Kind::Choice(MODES),
        doc: "auto | fast | agentic",
    },
    KeySpec {
        key: "recall.router",
        kind: Kind::Choice(ROUTERS),
        doc: "heuristic | llm",
    },
    KeySpec {
        key: "recall.markers",
        kind: Kind::TextList,
        doc: "detail-request phrases (comma-separated in env/flags)",
    },
    KeySpec {
        key: "recall.expander",
        kind: Kind::Choice(EXPANDERS),
        doc: "template | llm",
    },
    KeySpec {
        key: "recall.expansions",
        kind: Kind::Uint,
        doc: "query rewrites K (>= 1)",
    },
    KeySpec {
        key: "recall.top_k",
        kind: Kind::Uint,
        doc: "hits per query k (>= 1)",
    },
    KeySpec {
        key: "recall.fuse_limit",
        kind: Kind::Uint,
        doc: "snippets kept after fusion (>= 1)",
    },
    KeySpec {
        key: "recall.fusion_budget",
        kind: Kind::Uint,
        doc: "fused context char budget (>= 1)",
    },
    KeySpec {
        key: "recall.schedule",
        kind: Kind::Choice(SCHEDULES),
        doc: "concurrent | sequential",
    },
];

const ENV_ALIASES: &[(&str, &str)] = &[
    ("MEMTREE_LLM_ENDPOINT", "listener.endpoint"),
    ("MEMTREE_LLM_API_KEY", "listener.api_key"),
    ("MEMTREE_LLM_MODEL", "listener.model"),
];

fn spec(key: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|s| s.key == key)
}

/// Environment variable name for a key.
pub fn env_name(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.replace('.', "_").to_uppercase())
}

#[derive(Debug, Clone, PartialEq)]
enum Setting {
    Text(String),
    OptText(Option<String>),
    Uint(u64),
    OptUint(Option<u64>),
    Float(f64),
    TextList(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EngineConfig {
    pub schema_path: Option<PathBuf>,
    pub store_path: PathBuf,
    pub chunk_w: usize,
    pub gate: GateConfig,
    /// Used when the gate is in marker mode.
    pub deletion_marker: String,
    pub listener: ListenerConfig,
    pub max_retries: u32,
    pub recall: RecallConfig,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            schema_path: None,
            store_path: PathBuf::from(DEFAULT_STORE_PATH),
            chunk_w: DEFAULT_CHUNK_W,
            gate: GateConfig::default(),
            deletion_marker: DEFAULT_MARKER.to_string(),
            listener: ListenerConfig::default(),
            max_retries: DEFAULT_MAX_RETRIES,
            recall: RecallConfig::default(),
        }
    }
}

fn parse_text(kind: Kind, key: &str, raw: &str, source: &Source) -> Result<Setting, ConfigError> {
    let mismatch = || ConfigError::Type {
        key: key.to_string(),
        expected: kind.expected(),
        found: format!("{raw:?}"),
        origin: source.clone(),
    };
    Ok(match kind {
        Kind::Text => Setting::Text(raw.to_string()),
        Kind::OptText => Setting::OptText((!raw.is_empty()).then(|| raw.to_string())),
        Kind::Uint => Setting::Uint(raw.trim().parse().map_err(|_| mismatch())?),
        Kind::OptUint => match raw.trim() {
            "" | "none" => Setting::OptUint(None),
            n => Setting::OptUint(Some(n.parse().map_err(|_| mismatch())?)),
        },
        Kind::Float => {
            let v: f64 = raw.trim().parse().map_err(|_| mismatch())?;
            if !v.is_finite() {
                return Err(mismatch());
            }
            Setting::Float(v)
        }
        Kind::Choice(options) => {
            let v = raw.trim().to_ascii_lowercase();
            if !options.contains(&v.as_str()) {
                return Err(ConfigError::Invalid {
                    key: key.to_string(),
                    message: format!("{raw:?} is not one of {}", options.join(", ")),
                });
            }
            Setting::Text(v)
        }
        Kind::TextList => Setting::TextList(
            raw.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .collect(),
        ),
    })
}

fn toml_type(v: &toml::Value) -> String {
    format!("{} {}", v.type_str(), v)
}

fn from_toml(kind: Kind, key: &str, value: &toml::Value) -> Result<Setting, ConfigError> {
    let mismatch = || ConfigError::Type {
        key: key.to_string(),
        expected: kind.expected(),
        found: toml_type(value),
        origin: Source::File,
    };
    match (kind, value) {
        (Kind::Text | Kind::OptText | Kind::Choice(_) | Kind::OptUint, toml::Value::String(s)) => {
            parse_text(kind, key, s, &Source::File)
        }
        (Kind::Uint, toml::Value::Integer(n)) if *n >= 0 => Ok(Setting::Uint(*n as u64)),
        (Kind::OptUint, toml::Value::Integer(n)) if *n >= 0 => {
            Ok(Setting::OptUint(Some(*n as u64)))
        }
        (Kind::Float, toml::Value::Float(f)) if f.is_finite() => Ok(Setting::Float(*f)),
        (Kind::Float, toml::Value::Integer(n)) => Ok(Setting::Float(*n as f64)),
        (Kind::TextList, toml::Value::Array(items)) => items
            .iter()
            .map(|i| i.as_str().map(str::to_string).ok_or_else(mismatch))
            .collect::<Result<_, _>>()
            .map(Setting::TextList),
        _ => Err(mismatch()),
    }
}

fn invalid(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        message: message.into(),
    }
}

fn to_usize(key: &str, n: u64) -> Result<usize, ConfigError> {
    usize::try_from(n).map_err(|_| invalid(key, "value too large"))
}

impl EngineConfig {
    fn assign(&mut self, key: &str, setting: Setting) -> Result<(), ConfigError> {
        use Setting as S;
        match (key, setting) {
            ("schema_path", S::OptText(v)) => self.schema_path = v.map(PathBuf::from),
            ("store_path", S::Text(v)) => self.store_path = PathBuf::from(v),
            ("chunk_w", S::Uint(n)) => self.chunk_w = to_usize(key, n)?,
            ("gate.schema_policy", S::Text(v)) => {
                self.gate.schema_policy = if v == "extend" {
                    SchemaPolicy::Extend
                } else {
                    SchemaPolicy::Strict
                }
            }
            ("gate.deletion_mode", S::Text(v)) => {
                self.gate.deletion_mode = if v == "marker" {
                    DeletionMode::Marker(self.deletion_marker.clone())
                } else {
                    DeletionMode::Clear
                }
            }
            ("gate.deletion_marker", S::Text(v)) => {
                if let DeletionMode::Marker(m) = &mut self.gate.deletion_mode {
                    *m = v.clone();
                }
                self.deletion_marker = v;
            }
            ("gate.budget_override", S::OptUint(v)) => {
                self.gate.budget_override = v.map(|n| to_usize(key, n)).transpose()?
            }
            ("gate.max_depth", S::Uint(n)) => self.gate.max_depth = to_usize(key, n)?,
            ("listener.endpoint", S::OptText(v)) => self.listener.endpoint = v,
            ("listener.api_key", S::OptText(v)) => self.listener.api_key = v,
            ("listener.model", S::Text(v)) => self.listener.model = v,
            ("listener.temperature", S::Float(v)) => self.listener.temperature = v,
            ("listener.top_p", S::Float(v)) => self.listener.top_p = v,
            ("listener.max_tokens", S::Uint(n)) => {
                self.listener.max_tokens =
                    u32::try_from(n).map_err(|_| invalid(key, "value too large"))?
            }
            ("listener.timeout_secs", S::Float(v)) => self.listener.timeout_secs = v,
            ("listener.max_retries", S::Uint(n)) => {
                self.max_retries = u32::try_from(n).map_err(|_| invalid(key, "value too large"))?
            }
            ("listener.strategy", S::Text(_)) => {}
            ("recall.mode", S::Text(v)) => {
                self.recall.mode = v.parse::<RecallMode>().map_err(|e| invalid(key, e))?
            }
            ("recall.router", S::Text(v)) => {
                self.recall.router.kind = if v == "llm" {
                    RouterKind::Llm
                } else {
                    RouterKind::Heuristic
                }
            }
            ("recall.markers", S::TextList(v)) => self.recall.router.markers = v,
            ("recall.expander", S::Text(v)) => {
                self.recall.expander = if v == "llm" {
                    ExpanderKind::Llm
                } else {
                    ExpanderKind::Template
                }
            }
            ("recall.expansions", S::Uint(n)) => self.recall.expansions = to_usize(key, n)?,
            ("recall.top_k", S::Uint(n)) => self.recall.top_k = to_usize(key, n)?,
            ("recall.fuse_limit", S::Uint(n)) => self.recall.fuse_limit = to_usize(key, n)?,
            ("recall.fusion_budget", S::Uint(n)) => self.recall.fusion_budget = to_usize(key, n)?,
            ("recall.schedule", S::Text(v)) => {
                self.recall.schedule = if v == "sequential" {
                    Schedule::Sequential
                } else {
                    Schedule::Concurrent
                }
            }
            (other, setting) => unreachable!("registry kind mismatch for {other}: {setting:?}"),
        }
        Ok(())
    }

    /// Current value of `key` rendered as text (lists comma-joined, unset
    /// optionals empty).
    pub fn get(&self, key: &str) -> Option<String> {
        let opt = |v: &Option<String>| v.clone().unwrap_or_default();
        Some(match key {
            "schema_path" => self
                .schema_path
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            "store_path" => self.store_path.display().to_string(),
            "chunk_w" => self.chunk_w.to_string(),
            "gate.schema_policy" => match self.gate.schema_policy {
                SchemaPolicy::Strict => "strict".into(),
                SchemaPolicy::Extend => "extend".into(),
            },
            "gate.deletion_mode" => match self.gate.deletion_mode {
                DeletionMode::Clear => "clear".into(),
                DeletionMode::Marker(_) => "marker".into(),
            },
            "gate.deletion_marker" => self.deletion_marker.clone(),
            "gate.budget_override" => self
                .gate
                .budget_override
                .map_or_else(|| "none".into(), |n| n.to_string()),
            "gate.max_depth" => self.gate.max_depth.to_string(),
            "listener.endpoint" => opt(&self.listener.endpoint),
            "listener.api_key" => opt(&self.listener.api_key),
            "listener.model" => self.listener.model.clone(),
            "listener.temperature" => self.listener.temperature.to_string(),
            "listener.top_p" => self.listener.top_p.to_string(),
            "listener.max_tokens" => self.listener.max_tokens.to_string(),
            "listener.timeout_secs" => self.listener.timeout_secs.to_string(),
            "listener.max_retries" => self.max_retries.to_string(),
            "listener.strategy" => "direct".into(),
            "recall.mode" => format!("{:?}", self.recall.mode).to_lowercase(),
            "recall.router" => format!("{:?}", self.recall.router.kind).to_lowercase(),
            "recall.markers" => self.recall.router.markers.join(","),
            "recall.expander" => format!("{:?}", self.recall.expander).to_lowercase(),
            "recall.expansions" => self.recall.expansions.to_string(),
            "recall.top_k" => self.recall.top_k.to_string(),
            "recall.fuse_limit" => self.recall.fuse_limit.to_string(),
            "recall.fusion_budget" => self.recall.fusion_budget.to_string(),
            "recall.schedule" => format!("{:?}", self.recall.schedule).to_lowercase(),
            _ => return None,
        })
    }

    /// Applies `key=value` text as if from `source`.
    pub fn set_text(&mut self, key: &str, value: &str, source: Source) -> Result<(), ConfigError> {
        let spec = spec(key).ok_or_else(|| ConfigError::UnknownKey {
            key: key.to_string(),
            origin: source.clone(),
        })?;
        let setting = parse_text(spec.kind, key, value, &source)?;
        self.assign(key, setting)
    }

    fn apply_toml(&mut self, text: &str) -> Result<(), ConfigError> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
        let mut flat = Vec::new();
        flatten("", &table, &mut flat)?;
        for (key, value) in flat {
            let spec = spec(&key).ok_or_else(|| ConfigError::UnknownKey {
                key: key.clone(),
                origin: Source::File,
            })?;
            let setting = from_toml(spec.kind, &key, value)?;
            self.assign(&key, setting)?;
        }
        Ok(())
    }

    /// Range and cross-field checks.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let at_least_one = [
            ("chunk_w", self.chunk_w),
            ("recall.expansions", self.recall.expansions),
            ("recall.top_k", self.recall.top_k),
            ("recall.fuse_limit", self.recall.fuse_limit),
            ("recall.fusion_budget", self.recall.fusion_budget),
            ("listener.max_tokens", self.listener.max_tokens as usize),
        ];
        for (key, v) in at_least_one {
            if v == 0 {
                return Err(invalid(key, "must be at least 1"));
            }
        }
        if !(0.0..=2.0).contains(&self.listener.temperature) {
            return Err(invalid("listener.temperature", "must be within [0, 2]"));
        }
        if !(self.listener.top_p > 0.0 && self.listener.top_p <= 1.0) {
            return Err(invalid("listener.top_p", "must be within (0, 1]"));
        }
        if self.listener.timeout_secs <= 0.0 {
            return Err(invalid("listener.timeout_secs", "must be positive"));
        }
        if self.gate.budget_override == Some(0) {
            return Err(invalid("gate.budget_override", "must be at least 1"));
        }
        if self.gate.max_depth < crate::schema::MIN_LEAF_DEPTH {
            return Err(invalid(
                "gate.max_depth",
                format!("must be at least {}", crate::schema::MIN_LEAF_DEPTH),
            ));
        }
        if self.deletion_marker.contains('\n') {
            return Err(invalid("gate.deletion_marker", "must be a single line"));
        }
        if self.store_path.as_os_str().is_empty() {
            return Err(invalid("store_path", "must not be empty"));
        }
        if let Some(p) = &self.schema_path {
            if !p.is_file() {
                return Err(invalid(
                    "schema_path",
                    format!("{} is not a readable file", p.display()),
                ));
            }
        }
        Ok(())
    }
}

fn flatten<'a>(
    prefix: &str,
    table: &'a toml::Table,
    out: &mut Vec<(String, &'a toml::Value)>,
) -> Result<(), ConfigError> {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            toml::Value::Table(inner)
                if prefix.is_empty() && matches!(k.as_str(), "gate" | "listener" | "recall") =>
            {
                flatten(&key, inner, out)?
            }
            _ => out.push((key, v)),
        }
    }
    Ok(())
}

/// Maps `MEMTREE_*` variables to keys. Reserved names are skipped; other
/// unknown names are an error.
pub fn env_overrides<I>(vars: I) -> Result<Vec<(String, String, String)>, ConfigError>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut out = Vec::new();
    let mut vars: Vec<(String, String)> = vars
        .into_iter()
        .filter(|(k, _)| k.starts_with(ENV_PREFIX) && !ENV_RESERVED.contains(&k.as_str()))
        .collect();
    // Aliases first so the canonical names win when both are set.
    vars.sort_by_key(|(k, _)| (!ENV_ALIASES.iter().any(|(a, _)| a == k), k.clone()));
    for (var, value) in vars {
        let key = ENV_ALIASES
            .iter()
            .find(|(a, _)| *a == var)
            .map(|(_, key)| key.to_string())
            .or_else(|| {
                KEYS.iter()
                    .find(|s| env_name(s.key) == var)
                    .map(|s| s.key.to_string())
            })
            .ok_or_else(|| ConfigError::UnknownKey {
                key: var.clone(),
                origin: Source::Env(var.clone()),
            })?;
        out.push((var, key, value));
    }
    Ok(out)
}

/// Splits `key=value`.
pub fn parse_flag(text: &str) -> Result<(String, String), ConfigError> {
    let (k, v) = text
        .split_once('=')
        .ok_or_else(|| ConfigError::Syntax(format!("expected key=value, got {text:?}")))?;
    Ok((k.trim().to_string(), v.to_string()))
}

/// Layers the sources over the defaults and validates the result.
pub fn resolve_config(
    file_text: Option<&str>,
    env: impl IntoIterator<Item = (String, String)>,
    flags: &[(String, String)],
) -> Result<EngineConfig, ConfigError> {
    let mut cfg = EngineConfig::default();
    if let Some(text) = file_text {
        cfg.apply_toml(text)?;
    }
    for (var, key, value) in env_overrides(env)? {
        cfg.set_text(&key, &value, Source::Env(var))?;
    }
    for (key, value) in flags {
        cfg.set_text(key, value, Source::Flag)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Reads `path` (if any) and the process environment.
pub fn load_config(
    path: Option<&Path>,
    flags: &[(String, String)],
) -> Result<EngineConfig, ConfigError> {
    let text = path
        .map(|p| {
            std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                path: p.to_path_buf(),
                source,
            })
        })
        .transpose()?;
    resolve_config(text.as_deref(), std::env::vars(), flags)
}
