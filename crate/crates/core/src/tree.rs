//! PersonaTree: a schema instance holding budgeted leaf text.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::path::NodePath;
use crate::raw::RawNode;
use crate::schema::{Schema, SchemaNode};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TreeError {
    #[error("snapshot is not valid JSON: {0}")]
    Parse(String),
    #[error("at `{path}`: {message}")]
    Structure { path: String, message: String },
    #[error("at `{path}`: value is {len} chars, over budget {budget}")]
    OverBudget {
        path: String,
        len: usize,
        budget: usize,
    },
}

/// Hex SHA-256 of the canonical serialization.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TreeDigest(pub String);

impl fmt::Display for TreeDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SerializeStyle {
    Canonical,
    PromptCompact,
}

/// Outcome of addressing a node by text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Resolution {
    Leaf {
        declared: bool,
        budget: usize,
    },
    Branch,
    /// Parent branch exists, no child of that name.
    MissingLeaf,
    MissingBranch,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct ExtLeaf {
    pub budget: usize,
    pub value: String,
}

/// One leaf as seen by iteration, in canonical order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LeafView<'a> {
    pub path: NodePath,
    pub value: &'a str,
    pub budget: usize,
    pub declared: bool,
}

#[derive(Debug, Clone)]
pub struct PersonaTree {
    schema: Arc<Schema>,
    values: Vec<String>,
    // parent key -> leaf name -> leaf, for leaves created under the extend policy
    extensions: BTreeMap<String, BTreeMap<String, ExtLeaf>>,
}

impl PartialEq for PersonaTree {
    fn eq(&self, other: &Self) -> bool {
        (Arc::ptr_eq(&self.schema, &other.schema) || self.schema == other.schema)
            && self.values == other.values
            && self.extensions == other.extensions
    }
}

impl Eq for PersonaTree {}

/// T_0: every leaf at its declared default.
pub fn init_tree(schema: Arc<Schema>) -> PersonaTree {
    PersonaTree::new(schema)
}

impl PersonaTree {
    pub fn new(schema: Arc<Schema>) -> Self {
        let values = schema
            .leaves()
            .iter()
            .map(|l| l.spec.default.clone())
            .collect();
        Self {
            schema,
            values,
            extensions: BTreeMap::new(),
        }
    }

    pub fn schema(&self) -> &Arc<Schema> {
        &self.schema
    }

    pub fn get(&self, path: &NodePath) -> Option<&str> {
        if let Some(i) = self.schema.leaf_position(path) {
            return Some(&self.values[i]);
        }
        self.extensions
            .get(&path.parent_key())
            .and_then(|m| m.get(path.name()))
            .map(|l| l.value.as_str())
    }

    /// Budget of an existing leaf, declared or extended.
    pub fn budget(&self, path: &NodePath) -> Option<usize> {
        if let Some(spec) = self.schema.leaf(path) {
            return Some(spec.budget);
        }
        self.extensions
            .get(&path.parent_key())
            .and_then(|m| m.get(path.name()))
            .map(|l| l.budget)
    }

    pub fn extension_count(&self) -> usize {
        self.extensions.values().map(BTreeMap::len).sum()
    }

    pub fn leaf_count(&self) -> usize {
        self.values.len() + self.extension_count()
    }

    /// Total: never fails, whatever the input text.
    pub fn resolve_path(&self, text: &str) -> Resolution {
        let segments: Vec<&str> = text.split('.').collect();
        if segments.iter().any(|s| s.is_empty()) {
            return Resolution::MissingBranch;
        }
        if self.schema.is_branch(text) {
            return Resolution::Branch;
        }
        if segments.len() >= 2 {
            if let Ok(path) = NodePath::new(segments.iter().copied()) {
                if let Some(spec) = self.schema.leaf(&path) {
                    return Resolution::Leaf {
                        declared: true,
                        budget: spec.budget,
                    };
                }
                if let Some(ext) = self
                    .extensions
                    .get(&path.parent_key())
                    .and_then(|m| m.get(path.name()))
                {
                    return Resolution::Leaf {
                        declared: false,
                        budget: ext.budget,
                    };
                }
            }
            let parent = segments[..segments.len() - 1].join(".");
            if self.schema.is_branch(&parent) {
                return Resolution::MissingLeaf;
            }
        }
        Resolution::MissingBranch
    }

    /// All leaves in canonical order: declared children of each branch first,
    /// then extension leaves sorted by name.
    pub fn leaves(&self) -> Vec<LeafView<'_>> {
        let mut out = Vec::with_capacity(self.leaf_count());
        let mut declared = 0usize;
        let mut prefix = Vec::new();
        self.collect_leaves(self.schema.trunks(), &mut prefix, &mut declared, &mut out);
        out
    }

    fn collect_leaves<'a>(
        &'a self,
        children: &[(String, SchemaNode)],
        prefix: &mut Vec<String>,
        declared: &mut usize,
        out: &mut Vec<LeafView<'a>>,
    ) {
        for (name, node) in children {
            prefix.push(name.clone());
            match node {
                SchemaNode::Leaf(spec) => {
                    out.push(LeafView {
                        path: NodePath::new(prefix.clone()).expect("schema paths are valid"),
                        value: &self.values[*declared],
                        budget: spec.budget,
                        declared: true,
                    });
                    *declared += 1;
                }
                SchemaNode::Branch(kids) => {
                    self.collect_leaves(kids, prefix, declared, out);
                    if let Some(ext) = self.extensions.get(&prefix.join(".")) {
                        for (leaf, l) in ext {
                            let mut segs = prefix.clone();
                            segs.push(leaf.clone());
                            out.push(LeafView {
                                path: NodePath::new(segs).expect("extension paths are valid"),
                                value: &l.value,
                                budget: l.budget,
                                declared: false,
                            });
                        }
                    }
                }
            }
            prefix.pop();
        }
    }

    /// Non-empty leaves in canonical order.
    pub fn populated(&self) -> Vec<LeafView<'_>> {
        self.leaves()
            .into_iter()
            .filter(|l| !l.value.is_empty())
            .collect()
    }

    pub(crate) fn set_declared(&mut self, index: usize, value: String) {
        self.values[index] = value;
    }

    /// Writes a leaf that already exists (declared or extended). Returns false if absent.
    pub(crate) fn set_existing(&mut self, path: &NodePath, value: String) -> bool {
        if let Some(i) = self.schema.leaf_position(path) {
            self.set_declared(i, value);
            return true;
        }
        match self
            .extensions
            .get_mut(&path.parent_key())
            .and_then(|m| m.get_mut(path.name()))
        {
            Some(l) => {
                l.value = value;
                true
            }
            None => false,
        }
    }

    pub(crate) fn insert_extension(&mut self, path: &NodePath, budget: usize, value: String) {
        self.extensions
            .entry(path.parent_key())
            .or_default()
            .insert(path.name().to_string(), ExtLeaf { budget, value });
    }

    pub fn serialize(&self, style: SerializeStyle) -> String {
        match style {
            SerializeStyle::Canonical => self.to_canonical(),
            SerializeStyle::PromptCompact => self.to_prompt_compact(),
        }
    }

    /// Pretty JSON, 2-space indentation, LF line endings, schema key order.
    pub fn to_canonical(&self) -> String {
        use serde_json::{Map, Value};

        fn branch(
            tree: &PersonaTree,
            children: &[(String, SchemaNode)],
            prefix: &mut Vec<String>,
            declared: &mut usize,
        ) -> Map<String, Value> {
            let mut map = Map::new();
            for (name, node) in children {
                prefix.push(name.clone());
                match node {
                    SchemaNode::Leaf(_) => {
                        map.insert(name.clone(), Value::String(tree.values[*declared].clone()));
                        *declared += 1;
                    }
                    SchemaNode::Branch(kids) => {
                        let mut inner = branch(tree, kids, prefix, declared);
                        if let Some(ext) = tree.extensions.get(&prefix.join(".")) {
                            for (leaf, l) in ext {
                                inner.insert(leaf.clone(), Value::String(l.value.clone()));
                            }
                        }
                        map.insert(name.clone(), Value::Object(inner));
                    }
                }
                prefix.pop();
            }
            map
        }

        let mut declared = 0;
        let root = branch(self, self.schema.trunks(), &mut Vec::new(), &mut declared);
        serde_json::to_string_pretty(&Value::Object(root)).expect("json values serialize")
    }

    /// Indented outline: branches as `Name`, leaves as `Name:` with the text
    /// appended only when non-empty.
    pub fn to_prompt_compact(&self) -> String {
        fn walk(
            tree: &PersonaTree,
            children: &[(String, SchemaNode)],
            prefix: &mut Vec<String>,
            declared: &mut usize,
            out: &mut String,
        ) {
            let indent = "  ".repeat(prefix.len());
            for (name, node) in children {
                match node {
                    SchemaNode::Leaf(_) => {
                        leaf_line(out, &indent, name, &tree.values[*declared]);
                        *declared += 1;
                    }
                    SchemaNode::Branch(kids) => {
                        out.push_str(&indent);
                        out.push_str(name);
                        out.push('\n');
                        prefix.push(name.clone());
                        walk(tree, kids, prefix, declared, out);
                        if let Some(ext) = tree.extensions.get(&prefix.join(".")) {
                            let inner = "  ".repeat(prefix.len());
                            for (leaf, l) in ext {
                                leaf_line(out, &inner, leaf, &l.value);
                            }
                        }
                        prefix.pop();
                    }
                }
            }
        }

        fn leaf_line(out: &mut String, indent: &str, name: &str, value: &str) {
            out.push_str(indent);
            out.push_str(name);
            out.push(':');
            if !value.is_empty() {
                out.push(' ');
                out.push_str(value);
            }
            out.push('\n');
        }

        let mut out = String::new();
        walk(
            self,
            self.schema.trunks(),
            &mut Vec::new(),
            &mut 0,
            &mut out,
        );
        out
    }

    /// Upper bound on `to_prompt_compact().chars().count()` given the current
    /// leaf set: structure lines plus every leaf filled to its budget.
    pub fn prompt_compact_bound(&self) -> usize {
        fn walk(
            children: &[(String, SchemaNode)],
            depth: usize,
            tree: &PersonaTree,
            prefix: &mut Vec<String>,
        ) -> usize {
            let mut total = 0;
            for (name, node) in children {
                let name_len = name.chars().count();
                match node {
                    SchemaNode::Leaf(spec) => total += 2 * depth + name_len + 2 + spec.budget + 1,
                    SchemaNode::Branch(kids) => {
                        total += 2 * depth + name_len + 1;
                        prefix.push(name.clone());
                        total += walk(kids, depth + 1, tree, prefix);
                        if let Some(ext) = tree.extensions.get(&prefix.join(".")) {
                            for (leaf, l) in ext {
                                total += 2 * (depth + 1) + leaf.chars().count() + 2 + l.budget + 1;
                            }
                        }
                        prefix.pop();
                    }
                }
            }
            total
        }
        walk(self.schema.trunks(), 0, self, &mut Vec::new())
    }

    pub fn digest(&self) -> TreeDigest {
        TreeDigest(hex::encode(Sha256::digest(self.to_canonical().as_bytes())))
    }

    /// Inverse of [`PersonaTree::to_canonical`]. Keys under a known branch that
    /// the schema does not declare become extension leaves with `extension_budget`.
    pub fn from_canonical(
        schema: Arc<Schema>,
        text: &str,
        extension_budget: usize,
    ) -> Result<Self, TreeError> {
        let raw = RawNode::parse(text).map_err(|e| TreeError::Parse(e.to_string()))?;
        let RawNode::Object(entries) = raw else {
            return Err(tree_structure("", "snapshot must be an object"));
        };
        let mut tree = PersonaTree::new(schema.clone());
        let mut assigned = vec![false; schema.leaf_count()];
        tree.absorb(
            schema.trunks(),
            entries,
            &mut Vec::new(),
            extension_budget,
            &mut assigned,
        )?;
        if let Some(i) = assigned.iter().position(|a| !a) {
            return Err(tree_structure(
                &schema.leaves()[i].path.to_string(),
                "declared leaf missing from snapshot",
            ));
        }
        Ok(tree)
    }

    fn absorb(
        &mut self,
        children: &[(String, SchemaNode)],
        entries: Vec<(String, RawNode)>,
        prefix: &mut Vec<String>,
        extension_budget: usize,
        assigned: &mut [bool],
    ) -> Result<(), TreeError> {
        for (key, value) in entries {
            prefix.push(key.clone());
            let here = prefix.join(".");
            match (children.iter().find(|(n, _)| *n == key), value) {
                (Some((_, SchemaNode::Branch(kids))), RawNode::Object(inner)) => {
                    self.absorb(kids, inner, prefix, extension_budget, assigned)?;
                }
                (Some((_, SchemaNode::Leaf(spec))), RawNode::Text(text)) => {
                    let path = NodePath::new(prefix.clone()).expect("schema paths are valid");
                    let i = self.schema.leaf_position(&path).expect("declared leaf");
                    if assigned[i] {
                        return Err(tree_structure(&here, "leaf appears twice"));
                    }
                    check_budget(&here, &text, spec.budget)?;
                    assigned[i] = true;
                    self.values[i] = text;
                }
                (None, RawNode::Text(text)) if prefix.len() >= 2 => {
                    let path = NodePath::new(prefix.clone())
                        .map_err(|e| tree_structure(&here, &e.to_string()))?;
                    if self.get(&path).is_some() {
                        return Err(tree_structure(&here, "leaf appears twice"));
                    }
                    check_budget(&here, &text, extension_budget)?;
                    self.insert_extension(&path, extension_budget, text);
                }
                (_, other) => {
                    return Err(tree_structure(
                        &here,
                        &format!("unexpected {} for this node", other.kind()),
                    ))
                }
            }
            prefix.pop();
        }
        Ok(())
    }
}

fn tree_structure(path: &str, message: &str) -> TreeError {
    TreeError::Structure {
        path: path.to_string(),
        message: message.to_string(),
    }
}

fn check_budget(path: &str, text: &str, budget: usize) -> Result<(), TreeError> {
    let len = text.chars().count();
    if len > budget {
        return Err(TreeError::OverBudget {
            path: path.to_string(),
            len,
            budget,
        });
    }
    Ok(())
}
