//! Long-term persona memory for dialogue agents.
//!
//! Conversation history is cut into chunks; for each chunk a listener model
//! emits edit operations (`ADD`/`UPDATE`/`DELETE`/`NO_OP`) against a
//! schema-bounded [`PersonaTree`]. A gate validates and applies them, and every
//! resulting tree state is committed to an append-only [`VersionStore`]. At
//! answer time the tree is serialized into the prompt directly (fast mode) or
//! used to steer retrieval over the raw history (agentic recall).

pub mod client;
pub mod config;
pub mod eval;
pub mod gate;
pub mod ingest;
pub mod listener;
pub mod ops;
pub mod path;
mod raw;
pub mod recall;
pub mod rl;
pub mod schema;
pub mod store;
pub mod tree;

pub use gate::{
    apply_ops, enforce_budget, validate_op, ApplyReport, DeletionMode, GateConfig, SchemaPolicy,
};
pub use ops::{parse_op_line, parse_op_list, render_op, MemOp, ParseDiagnostics, Rejection};
pub use path::NodePath;
pub use schema::{load_schema, Schema, SchemaError};
pub use store::{diff, LeafChange, StoreError, VersionRecord, VersionStore};
pub use tree::{init_tree, PersonaTree, Resolution, SerializeStyle, TreeDigest};
