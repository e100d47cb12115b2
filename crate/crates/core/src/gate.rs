//! Safety gate: validates operations against the schema and policy, enforces
//! leaf budgets, and applies accepted operations in order. It never merges,
//! paraphrases or resolves conflicts; later writes to a path simply win.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ops::MemOp;
use crate::path::NodePath;
use crate::schema::{Schema, DEFAULT_LEAF_BUDGET, DEFAULT_MAX_DEPTH};
use crate::tree::{PersonaTree, Resolution};

pub const ELLIPSIS: char = '…';

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemaPolicy {
    #[default]
    Strict,
    Extend,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", content = "marker", rename_all = "snake_case")]
pub enum DeletionMode {
    #[default]
    Clear,
    Marker(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateConfig {
    pub schema_policy: SchemaPolicy,
    pub deletion_mode: DeletionMode,
    /// Caps every leaf budget; also the budget of extension leaves.
    pub budget_override: Option<usize>,
    pub max_depth: usize,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            schema_policy: SchemaPolicy::Strict,
            deletion_mode: DeletionMode::Clear,
            budget_override: None,
            max_depth: DEFAULT_MAX_DEPTH,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GateConfigError {
    #[error("budget override must be positive")]
    ZeroBudget,
    #[error("deletion marker is {len} chars but the smallest leaf budget is {budget}")]
    MarkerTooLong { len: usize, budget: usize },
    #[error("deletion marker must be a single line")]
    MarkerMultiline,
    #[error("max depth {0} is below the minimum leaf depth 2")]
    MaxDepth(usize),
}

impl GateConfig {
    /// Effective budget for a declared leaf.
    pub fn declared_budget(&self, declared: usize) -> usize {
        match self.budget_override {
            Some(cap) => cap.min(declared),
            None => declared,
        }
    }

    pub fn extension_budget(&self) -> usize {
        self.budget_override.unwrap_or(DEFAULT_LEAF_BUDGET)
    }

    pub fn validate(&self, schema: &Schema) -> Result<(), GateConfigError> {
        if self.budget_override == Some(0) {
            return Err(GateConfigError::ZeroBudget);
        }
        if self.max_depth < 2 {
            return Err(GateConfigError::MaxDepth(self.max_depth));
        }
        if let DeletionMode::Marker(marker) = &self.deletion_mode {
            if marker.contains(['\n', '\r']) {
                return Err(GateConfigError::MarkerMultiline);
            }
            let mut smallest = self.declared_budget(schema.min_budget().max(1));
            if self.schema_policy == SchemaPolicy::Extend {
                smallest = smallest.min(self.extension_budget());
            }
            let len = marker.chars().count();
            if len > smallest {
                return Err(GateConfigError::MarkerTooLong {
                    len,
                    budget: smallest,
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateRejection {
    #[error("path is not a writable leaf")]
    PathNotWritable,
    #[error("path addresses a branch")]
    PathIsBranch,
    #[error("schema extension is only allowed through ADD")]
    ExtensionDisallowed,
    #[error("extension depth exceeds the configured maximum")]
    DepthExceeded,
    #[error("value contains a line break")]
    InvalidValue,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ApplyReport {
    pub applied: Vec<(MemOp, String)>,
    pub rejected: Vec<(MemOp, GateRejection)>,
    pub truncated: Vec<NodePath>,
}

/// Compact form stored alongside each committed version.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ReportSummary {
    pub applied: usize,
    pub rejected: usize,
    pub truncated: usize,
    pub rejection_reasons: Vec<String>,
}

impl ApplyReport {
    pub fn summary(&self) -> ReportSummary {
        ReportSummary {
            applied: self.applied.len(),
            rejected: self.rejected.len(),
            truncated: self.truncated.len(),
            rejection_reasons: self
                .rejected
                .iter()
                .map(|(op, why)| format!("{}: {why}", crate::ops::render_op(op)))
                .collect(),
        }
    }
}

/// What a validated operation will touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Existing { budget: usize },
    NewExtension { budget: usize },
    Nothing,
}

pub fn validate_op(
    tree: &PersonaTree,
    op: &MemOp,
    cfg: &GateConfig,
) -> Result<Target, GateRejection> {
    let Some(path) = op.path() else {
        return Ok(Target::Nothing);
    };
    if op.value().is_some_and(|v| v.contains(['\n', '\r'])) {
        return Err(GateRejection::InvalidValue);
    }
    match tree.resolve_path(&path.to_string()) {
        Resolution::Leaf {
            declared: true,
            budget,
        } => Ok(Target::Existing {
            budget: cfg.declared_budget(budget),
        }),
        Resolution::Leaf {
            declared: false,
            budget,
        } => Ok(Target::Existing { budget }),
        Resolution::Branch => Err(GateRejection::PathIsBranch),
        Resolution::MissingBranch => Err(GateRejection::PathNotWritable),
        Resolution::MissingLeaf => match (cfg.schema_policy, op) {
            (SchemaPolicy::Strict, _) => Err(GateRejection::PathNotWritable),
            (SchemaPolicy::Extend, MemOp::Add { .. }) => {
                if path.depth() > cfg.max_depth {
                    Err(GateRejection::DepthExceeded)
                } else {
                    Ok(Target::NewExtension {
                        budget: cfg.extension_budget(),
                    })
                }
            }
            (SchemaPolicy::Extend, _) => Err(GateRejection::ExtensionDisallowed),
        },
    }
}

/// Deterministic truncation to `budget` characters.
///
/// Over-budget text is cut at the last whitespace within the first
/// `budget - 1` characters (hard cut if there is none) and `…` is appended.
pub fn enforce_budget(value: &str, budget: usize) -> String {
    assert!(budget > 0, "leaf budgets are positive");
    if value.chars().count() <= budget {
        return value.to_string();
    }
    let keep: String = value.chars().take(budget - 1).collect();
    let cut = match keep.rfind(char::is_whitespace) {
        Some(i) if !keep[..i].trim_end().is_empty() => keep[..i].trim_end(),
        _ => keep.as_str(),
    };
    let mut out = String::with_capacity(cut.len() + ELLIPSIS.len_utf8());
    out.push_str(cut);
    out.push(ELLIPSIS);
    out
}

/// Applies `ops` in order to a copy of `tree`.
pub fn apply_ops(
    tree: &PersonaTree,
    ops: &[MemOp],
    cfg: &GateConfig,
) -> (PersonaTree, ApplyReport) {
    let mut next = tree.clone();
    let mut report = ApplyReport::default();
    for op in ops {
        if matches!(op, MemOp::NoOp) {
            continue;
        }
        let target = match validate_op(&next, op, cfg) {
            Ok(t) => t,
            Err(why) => {
                report.rejected.push((op.clone(), why));
                continue;
            }
        };
        let path = op.path().expect("non-NoOp ops carry a path");
        let budget = match target {
            Target::Existing { budget } | Target::NewExtension { budget } => budget,
            Target::Nothing => unreachable!("only NoOp has no target"),
        };
        let raw = match op {
            MemOp::Add { value, .. } | MemOp::Update { value, .. } => value.clone(),
            MemOp::Delete { .. } => match &cfg.deletion_mode {
                DeletionMode::Clear => String::new(),
                DeletionMode::Marker(m) => m.clone(),
            },
            MemOp::NoOp => unreachable!(),
        };
        let stored = enforce_budget(&raw, budget);
        if stored != raw {
            report.truncated.push(path.clone());
        }
        match target {
            Target::NewExtension { budget } => next.insert_extension(path, budget, stored.clone()),
            _ => {
                let written = next.set_existing(path, stored.clone());
                debug_assert!(written);
            }
        }
        report.applied.push((op.clone(), stored));
    }
    (next, report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::init_tree;
    use proptest::prelude::*;
    use std::sync::Arc;

    fn small() -> PersonaTree {
        let schema = Schema::from_json(
            r#"{"tree": {"T": {"B": {"x": "", "y": {"$budget": 12}}, "C": {"z": "preset"}}}}"#,
        )
        .unwrap();
        init_tree(Arc::new(schema))
    }

    fn p(s: &str) -> NodePath {
        s.parse().unwrap()
    }

    fn add(path: &str, v: &str) -> MemOp {
        MemOp::Add {
            path: p(path),
            value: v.into(),
        }
    }

    fn update(path: &str, v: &str) -> MemOp {
        MemOp::Update {
            path: p(path),
            value: v.into(),
        }
    }

    #[test]
    fn validate_rules() {
        let t = small();
        let strict = GateConfig::default();
        let extend = GateConfig {
            schema_policy: SchemaPolicy::Extend,
            ..GateConfig::default()
        };
        assert_eq!(
            validate_op(&t, &update("T.B.x", "a"), &strict),
            Ok(Target::Existing { budget: 500 })
        );
        assert_eq!(
            validate_op(&t, &add("T.B.new", "a"), &strict),
            Err(GateRejection::PathNotWritable)
        );
        assert_eq!(
            validate_op(&t, &add("T.B.new", "a"), &extend),
            Ok(Target::NewExtension { budget: 500 })
        );
        assert_eq!(
            validate_op(&t, &update("T.B.new", "a"), &extend),
            Err(GateRejection::ExtensionDisallowed)
        );
        assert_eq!(
            validate_op(&t, &add("T.Q.new", "a"), &extend),
            Err(GateRejection::PathNotWritable)
        );
        assert_eq!(
            validate_op(&t, &add("T.B", "a"), &strict),
            Err(GateRejection::PathIsBranch)
        );
        assert_eq!(
            validate_op(&t, &add("T.B.x", "a\nb"), &strict),
            Err(GateRejection::InvalidValue)
        );
        let shallow = GateConfig {
            max_depth: 2,
            ..extend
        };
        assert_eq!(
            validate_op(&t, &add("T.B.new", "a"), &shallow),
            Err(GateRejection::DepthExceeded)
        );
    }

    #[test]
    fn budget_enforcement() {
        assert_eq!(enforce_budget("abc", 500), "abc");
        let exact = "a".repeat(500);
        assert_eq!(enforce_budget(&exact, 500), exact);
        assert_eq!(enforce_budget("hello wonderful world", 12), "hello…");
        assert_eq!(enforce_budget("abcdefghijklmnop", 5), "abcd…");
        assert_eq!(enforce_budget("abc", 1), "…");
        assert_eq!(enforce_budget(" abcdefgh", 5), " abc…");
        let long: String = "word ".repeat(120);
        let cut = enforce_budget(&long, 500);
        assert!(cut.chars().count() <= 500);
        assert!(cut.ends_with(ELLIPSIS));
    }

    #[test]
    fn noop_is_identity() {
        let t = small();
        let (next, report) = apply_ops(&t, &[MemOp::NoOp], &GateConfig::default());
        assert_eq!(next.digest(), t.digest());
        assert!(report.applied.is_empty() && report.rejected.is_empty());
    }

    #[test]
    fn later_ops_supersede() {
        let (next, report) = apply_ops(
            &small(),
            &[add("T.B.x", "x"), update("T.B.x", "y")],
            &GateConfig::default(),
        );
        assert_eq!(next.get(&p("T.B.x")), Some("y"));
        assert_eq!(report.applied.len(), 2);
    }

    #[test]
    fn delete_modes() {
        let t = small();
        let del = MemOp::Delete { path: p("T.C.z") };
        let (cleared, _) = apply_ops(&t, std::slice::from_ref(&del), &GateConfig::default());
        assert_eq!(cleared.get(&p("T.C.z")), Some(""));
        let marker = GateConfig {
            deletion_mode: DeletionMode::Marker("[DELETED]".into()),
            ..GateConfig::default()
        };
        let (marked, report) = apply_ops(&t, &[del], &marker);
        assert_eq!(marked.get(&p("T.C.z")), Some("[DELETED]"));
        assert_eq!(report.applied[0].1, "[DELETED]");
    }

    #[test]
    fn truncation_is_reported() {
        let (next, report) = apply_ops(
            &small(),
            &[add("T.B.y", "a rather long sentence")],
            &GateConfig::default(),
        );
        assert_eq!(next.get(&p("T.B.y")), Some("a rather…"));
        assert_eq!(report.truncated, vec![p("T.B.y")]);
    }

    #[test]
    fn budget_override_caps() {
        let cfg = GateConfig {
            budget_override: Some(5),
            schema_policy: SchemaPolicy::Extend,
            ..GateConfig::default()
        };
        let (next, _) = apply_ops(
            &small(),
            &[add("T.B.x", "abcdefgh"), add("T.B.n", "abcdefgh")],
            &cfg,
        );
        assert_eq!(next.get(&p("T.B.x")), Some("abcd…"));
        assert_eq!(next.get(&p("T.B.n")), Some("abcd…"));
        assert_eq!(next.budget(&p("T.B.n")), Some(5));
    }

    #[test]
    fn config_validation() {
        let schema = small().schema().clone();
        let long_marker = GateConfig {
            deletion_mode: DeletionMode::Marker("x".repeat(13)),
            ..GateConfig::default()
        };
        assert!(matches!(
            long_marker.validate(&schema),
            Err(GateConfigError::MarkerTooLong {
                len: 13,
                budget: 12
            })
        ));
        assert!(GateConfig::default().validate(&schema).is_ok());
        let zero = GateConfig {
            budget_override: Some(0),
            ..GateConfig::default()
        };
        assert_eq!(zero.validate(&schema), Err(GateConfigError::ZeroBudget));
    }

    #[test]
    fn rejected_ops_are_reported_and_skipped() {
        let t = small();
        let ops = [add("Nope.x", "a"), MemOp::NoOp, update("T.B.x", "ok")];
        let (next, report) = apply_ops(&t, &ops, &GateConfig::default());
        assert_eq!(report.rejected.len(), 1);
        assert_eq!(report.applied.len(), 1);
        assert_eq!(next.get(&p("T.B.x")), Some("ok"));
        assert_eq!(report.applied.len() + report.rejected.len(), 2);
    }

    fn op_strategy() -> impl Strategy<Value = MemOp> {
        let paths = prop::sample::select(vec!["T.B.x", "T.B.y", "T.C.z", "T.B.n", "T.B", "X.y"]);
        let value = "[a-z ]{0,20}";
        prop_oneof![
            (paths.clone(), value).prop_map(|(pa, v)| add(pa, &v)),
            (paths.clone(), value).prop_map(|(pa, v)| update(pa, &v)),
            paths.prop_map(|pa| MemOp::Delete { path: p(pa) }),
            Just(MemOp::NoOp),
        ]
    }

    proptest! {
        #[test]
        fn enforce_budget_length(value in "\\PC{0,200}", budget in 1usize..120) {
            let out = enforce_budget(&value, budget);
            prop_assert!(out.chars().count() <= budget);
            if value.chars().count() <= budget {
                prop_assert_eq!(out, value);
            } else {
                prop_assert!(out.ends_with(ELLIPSIS));
            }
        }

        #[test]
        fn update_is_idempotent(v in "[a-z ]{0,30}") {
            let t = small();
            let cfg = GateConfig::default();
            let once = apply_ops(&t, &[update("T.B.y", &v)], &cfg).0;
            let twice = apply_ops(&t, &[update("T.B.y", &v), update("T.B.y", &v)], &cfg).0;
            prop_assert_eq!(once.digest(), twice.digest());
        }

        #[test]
        fn noops_are_neutral(ops in prop::collection::vec(op_strategy(), 0..12), at in any::<prop::sample::Index>()) {
            let t = small();
            let cfg = GateConfig { schema_policy: SchemaPolicy::Extend, ..GateConfig::default() };
            let base = apply_ops(&t, &ops, &cfg).0;
            let mut with = ops.clone();
            with.insert(at.index(ops.len() + 1), MemOp::NoOp);
            prop_assert_eq!(apply_ops(&t, &with, &cfg).0, base);
        }

        #[test]
        fn apply_is_deterministic_and_closed(ops in prop::collection::vec(op_strategy(), 0..12)) {
            let t = small();
            let cfg = GateConfig::default();
            let (a, report) = apply_ops(&t, &ops, &cfg);
            let (b, _) = apply_ops(&t, &ops, &cfg);
            prop_assert_eq!(a.digest(), b.digest());
            prop_assert_eq!(a.leaf_count(), t.leaf_count());
            for leaf in a.leaves() {
                prop_assert!(leaf.value.chars().count() <= leaf.budget);
            }
            let non_noop = ops.iter().filter(|o| !matches!(o, MemOp::NoOp)).count();
            prop_assert_eq!(report.applied.len() + report.rejected.len(), non_noop);
        }
    }
}
