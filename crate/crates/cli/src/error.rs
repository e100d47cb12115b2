use std::fmt;

use memtree_core::client::ClientError;
use memtree_core::config::ConfigError;
use memtree_core::eval::EvalError;
use memtree_core::ingest::{EvolveError, IngestError};
use memtree_core::store::StoreError;
use memtree_core::SchemaError;

/// Failure classes; each maps to one exit code and one error prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Class {
    Usage,
    Config,
    Store,
    Transport,
    Verification,
}

impl Class {
    pub fn code(self) -> u8 {
        match self {
            Class::Usage => 2,
            Class::Config => 3,
            Class::Store => 4,
            Class::Transport => 5,
            Class::Verification => 6,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Class::Usage => "usage",
            Class::Config => "config",
            Class::Store => "store",
            Class::Transport => "transport",
            Class::Verification => "verification",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub class: Class,
    pub message: String,
}

impl CliError {
    pub fn new(class: Class, message: impl Into<String>) -> Self {
        Self {
            class,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    /// Always a single line: `error[<class>]: <message>`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let flat = self.message.replace('\n', " ");
        write!(f, "error[{}]: {}", self.class.tag(), flat)
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::new(Class::Config, e.to_string())
    }
}

impl From<SchemaError> for CliError {
    fn from(e: SchemaError) -> Self {
        CliError::new(Class::Config, format!("schema: {e}"))
    }
}

impl From<StoreError> for CliError {
    fn from(e: StoreError) -> Self {
        let class = if e.is_verification() {
            Class::Verification
        } else {
            Class::Store
        };
        CliError::new(class, e.to_string())
    }
}

impl From<ClientError> for CliError {
    fn from(e: ClientError) -> Self {
        match e {
            ClientError::NotConfigured => CliError::new(Class::Config, e.to_string()),
            _ => CliError::new(Class::Transport, e.to_string()),
        }
    }
}

impl From<EvolveError> for CliError {
    fn from(e: EvolveError) -> Self {
        match e {
            EvolveError::Store(s) => s.into(),
            listener @ EvolveError::Listener { .. } => {
                CliError::new(Class::Transport, listener.to_string())
            }
        }
    }
}

impl From<IngestError> for CliError {
    fn from(e: IngestError) -> Self {
        CliError::new(Class::Usage, format!("history: {e}"))
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::new(Class::Usage, format!("cases: {e}"))
    }
}
