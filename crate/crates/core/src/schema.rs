//! Schema: the writable space of a persona tree.
//!
//! A schema document is JSON of the form
//!
//! ```json
//! {
//!   "default_budget": 500,
//!   "tree": {
//!     "Trunk": {
//!       "Branch": {
//!         "Leaf": "",
//!         "Other_Leaf": { "$budget": 200, "$default": "unknown" }
//!       }
//!     }
//!   }
//! }
//! ```
//!
//! A string declares a leaf whose default text is that string. An object whose
//! keys all start with `$` declares a leaf with explicit budget and default.
//! Any other object is a branch. Key order is the canonical order.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use thiserror::Error;

use crate::path::{validate_name, NodePath};
use crate::raw::RawNode;

pub const DEFAULT_LEAF_BUDGET: usize = 500;
pub const DEFAULT_MAX_DEPTH: usize = 6;
pub const MIN_LEAF_DEPTH: usize = 2;

/// Shipped biopsychosocial schema.
pub const DEFAULT_SCHEMA_JSON: &str = include_str!("../assets/default_schema.json");

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SchemaError {
    #[error("schema is not valid JSON: {0}")]
    Parse(String),
    #[error("at `{path}`: {message}")]
    Structure { path: String, message: String },
    #[error("at `{path}`: duplicate sibling name `{name}`")]
    DuplicateName { path: String, name: String },
    #[error("at `{path}`: invalid node name `{name}`")]
    InvalidName { path: String, name: String },
    #[error("at `{path}`: leaf budget must be positive")]
    ZeroBudget { path: String },
    #[error("at `{path}`: leaf depth {depth} outside [{min}, {max}]")]
    Depth {
        path: String,
        depth: usize,
        min: usize,
        max: usize,
    },
    #[error("at `{path}`: default text is {len} chars, over budget {budget}")]
    DefaultOverBudget {
        path: String,
        len: usize,
        budget: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeafSpec {
    pub budget: usize,
    pub default: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SchemaNode {
    Branch(Vec<(String, SchemaNode)>),
    Leaf(LeafSpec),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeafEntry {
    pub path: NodePath,
    pub spec: LeafSpec,
}

#[derive(Debug, Clone)]
pub struct Schema {
    trunks: Vec<(String, SchemaNode)>,
    max_depth: usize,
    default_budget: usize,
    leaves: Vec<LeafEntry>,
    leaf_index: HashMap<NodePath, usize>,
    branches: HashSet<String>,
}

impl PartialEq for Schema {
    fn eq(&self, other: &Self) -> bool {
        self.trunks == other.trunks
            && self.max_depth == other.max_depth
            && self.default_budget == other.default_budget
    }
}

impl Eq for Schema {}

impl Schema {
    pub fn from_json(text: &str) -> Result<Self, SchemaError> {
        Self::from_json_with_max_depth(text, DEFAULT_MAX_DEPTH)
    }

    pub fn from_json_with_max_depth(text: &str, max_depth: usize) -> Result<Self, SchemaError> {
        let raw = RawNode::parse(text).map_err(|e| SchemaError::Parse(e.to_string()))?;
        let RawNode::Object(entries) = raw else {
            return Err(structure("", "schema document must be an object"));
        };
        let mut default_budget = DEFAULT_LEAF_BUDGET;
        let mut tree = None;
        let mut seen = HashSet::new();
        for (key, value) in entries {
            if !seen.insert(key.clone()) {
                return Err(SchemaError::DuplicateName {
                    path: String::new(),
                    name: key,
                });
            }
            match key.as_str() {
                "default_budget" => default_budget = positive_int(&value, "default_budget")?,
                "tree" => tree = Some(value),
                other => return Err(structure("", &format!("unknown top-level key `{other}`"))),
            }
        }
        let tree = tree.ok_or_else(|| structure("", "missing `tree`"))?;
        let RawNode::Object(trunk_entries) = tree else {
            return Err(structure("tree", "must be an object of trunks"));
        };
        if trunk_entries.is_empty() {
            return Err(structure("tree", "schema declares no trunks"));
        }
        let trunks = build_children(&[], trunk_entries, default_budget, max_depth)?;
        Ok(Self::assemble(trunks, max_depth, default_budget))
    }

    /// The shipped default schema.
    pub fn default_schema() -> Self {
        Self::from_json(DEFAULT_SCHEMA_JSON).expect("shipped schema is valid")
    }

    fn assemble(
        trunks: Vec<(String, SchemaNode)>,
        max_depth: usize,
        default_budget: usize,
    ) -> Self {
        fn walk(
            prefix: &mut Vec<String>,
            children: &[(String, SchemaNode)],
            leaves: &mut Vec<LeafEntry>,
            branches: &mut HashSet<String>,
        ) {
            for (name, node) in children {
                prefix.push(name.clone());
                match node {
                    SchemaNode::Branch(kids) => {
                        branches.insert(prefix.join("."));
                        walk(prefix, kids, leaves, branches);
                    }
                    SchemaNode::Leaf(spec) => leaves.push(LeafEntry {
                        path: NodePath::new(prefix.clone()).expect("validated during build"),
                        spec: spec.clone(),
                    }),
                }
                prefix.pop();
            }
        }
        let mut leaves = Vec::new();
        let mut branches = HashSet::new();
        walk(&mut Vec::new(), &trunks, &mut leaves, &mut branches);
        let leaf_index = leaves
            .iter()
            .enumerate()
            .map(|(i, e)| (e.path.clone(), i))
            .collect();
        Self {
            trunks,
            max_depth,
            default_budget,
            leaves,
            leaf_index,
            branches,
        }
    }

    pub fn trunks(&self) -> &[(String, SchemaNode)] {
        &self.trunks
    }

    pub fn trunk_names(&self) -> impl Iterator<Item = &str> {
        self.trunks.iter().map(|(n, _)| n.as_str())
    }

    pub fn max_depth(&self) -> usize {
        self.max_depth
    }

    pub fn default_budget(&self) -> usize {
        self.default_budget
    }

    /// Declared leaves in canonical order.
    pub fn leaves(&self) -> &[LeafEntry] {
        &self.leaves
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves.len()
    }

    pub fn leaf_position(&self, path: &NodePath) -> Option<usize> {
        self.leaf_index.get(path).copied()
    }

    pub fn leaf(&self, path: &NodePath) -> Option<&LeafSpec> {
        self.leaf_position(path).map(|i| &self.leaves[i].spec)
    }

    /// `key` is the dot-joined text of a branch, e.g. `Trunk.Branch`.
    pub fn is_branch(&self, key: &str) -> bool {
        self.branches.contains(key)
    }

    pub fn min_budget(&self) -> usize {
        self.leaves.iter().map(|l| l.spec.budget).min().unwrap_or(0)
    }

    pub fn total_budget(&self) -> usize {
        self.leaves.iter().map(|l| l.spec.budget).sum()
    }

    /// Re-emits the schema as a document accepted by [`Schema::from_json`].
    pub fn to_json(&self) -> String {
        fn node(n: &SchemaNode, default_budget: usize) -> serde_json::Value {
            match n {
                SchemaNode::Leaf(spec) if spec.budget == default_budget => {
                    serde_json::Value::String(spec.default.clone())
                }
                SchemaNode::Leaf(spec) => {
                    let mut m = serde_json::Map::new();
                    m.insert("$budget".into(), spec.budget.into());
                    m.insert("$default".into(), spec.default.clone().into());
                    serde_json::Value::Object(m)
                }
                SchemaNode::Branch(kids) => serde_json::Value::Object(
                    kids.iter()
                        .map(|(k, v)| (k.clone(), node(v, default_budget)))
                        .collect(),
                ),
            }
        }
        let tree: serde_json::Map<String, serde_json::Value> = self
            .trunks
            .iter()
            .map(|(k, v)| (k.clone(), node(v, self.default_budget)))
            .collect();
        let mut doc = serde_json::Map::new();
        doc.insert("default_budget".into(), self.default_budget.into());
        doc.insert("tree".into(), serde_json::Value::Object(tree));
        serde_json::to_string_pretty(&serde_json::Value::Object(doc))
            .expect("json values serialize")
    }
}

/// Convenience wrapper matching the loader operation name.
pub fn load_schema(text: &str) -> Result<Arc<Schema>, SchemaError> {
    Schema::from_json(text).map(Arc::new)
}

fn structure(path: &str, message: &str) -> SchemaError {
    SchemaError::Structure {
        path: path.to_string(),
        message: message.to_string(),
    }
}

fn positive_int(value: &RawNode, path: &str) -> Result<usize, SchemaError> {
    match value {
        RawNode::Integer(n) if *n > 0 => Ok(*n as usize),
        RawNode::Integer(_) => Err(SchemaError::ZeroBudget {
            path: path.to_string(),
        }),
        other => Err(structure(
            path,
            &format!("expected positive integer, found {}", other.kind()),
        )),
    }
}

fn is_leaf_object(entries: &[(String, RawNode)]) -> bool {
    !entries.is_empty() && entries.iter().all(|(k, _)| k.starts_with('$'))
}

fn build_children(
    prefix: &[String],
    entries: Vec<(String, RawNode)>,
    default_budget: usize,
    max_depth: usize,
) -> Result<Vec<(String, SchemaNode)>, SchemaError> {
    let here = prefix.join(".");
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(entries.len());
    for (name, value) in entries {
        if validate_name(&name).is_err() {
            return Err(SchemaError::InvalidName { path: here, name });
        }
        if !seen.insert(name.clone()) {
            return Err(SchemaError::DuplicateName { path: here, name });
        }
        let mut child_path = prefix.to_vec();
        child_path.push(name.clone());
        let child_key = child_path.join(".");
        let depth = child_path.len();
        let node = match value {
            RawNode::Text(default) => leaf(&child_key, depth, default_budget, default, max_depth)?,
            RawNode::Object(kids) if is_leaf_object(&kids) => {
                let mut budget = default_budget;
                let mut default = String::new();
                for (k, v) in kids {
                    match (k.as_str(), v) {
                        ("$budget", v) => budget = positive_int(&v, &child_key)?,
                        ("$default", RawNode::Text(t)) => default = t,
                        ("$default", other) => {
                            return Err(structure(
                                &child_key,
                                &format!("`$default` must be a string, found {}", other.kind()),
                            ))
                        }
                        (other, _) => {
                            return Err(structure(
                                &child_key,
                                &format!("unknown leaf attribute `{other}`"),
                            ))
                        }
                    }
                }
                leaf(&child_key, depth, budget, default, max_depth)?
            }
            RawNode::Object(kids) => {
                if kids.is_empty() {
                    return Err(structure(&child_key, "branch has no children"));
                }
                if depth >= max_depth {
                    return Err(SchemaError::Depth {
                        path: child_key,
                        depth: depth + 1,
                        min: MIN_LEAF_DEPTH,
                        max: max_depth,
                    });
                }
                SchemaNode::Branch(build_children(
                    &child_path,
                    kids,
                    default_budget,
                    max_depth,
                )?)
            }
            other => {
                return Err(structure(
                    &child_key,
                    &format!("expected leaf or branch, found {}", other.kind()),
                ))
            }
        };
        out.push((name, node));
    }
    Ok(out)
}

fn leaf(
    path: &str,
    depth: usize,
    budget: usize,
    default: String,
    max_depth: usize,
) -> Result<SchemaNode, SchemaError> {
    if !(MIN_LEAF_DEPTH..=max_depth).contains(&depth) {
        return Err(SchemaError::Depth {
            path: path.to_string(),
            depth,
            min: MIN_LEAF_DEPTH,
            max: max_depth,
        });
    }
    if budget == 0 {
        return Err(SchemaError::ZeroBudget {
            path: path.to_string(),
        });
    }
    let len = default.chars().count();
    if len > budget {
        return Err(SchemaError::DefaultOverBudget {
            path: path.to_string(),
            len,
            budget,
        });
    }
    Ok(SchemaNode::Leaf(LeafSpec { budget, default }))
}
