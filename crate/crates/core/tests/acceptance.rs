//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed. Set `UPDATE_GOLDEN=1` to rewrite the golden
//! files under `tests/fixtures/` from the current build.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::rngs::StdRng;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use serde_json::{json, Value};

use memtree_core::client::MockChatClient;
use memtree_core::eval::{load_cases, run_eval, EvalCase, EvalReport, OracleClient};
use memtree_core::ingest::{
    chunk, evolve, normalize_history, DialogueChunk, DialogueTurn, RetryPolicy, Role,
    DEFAULT_CHUNK_WINDOW,
};
use memtree_core::listener::ScriptedListener;
use memtree_core::ops::{normalize_op_text, render_ops};
use memtree_core::recall::{
    expand_queries, fast_context, rerank_fuse, retrieve_parallel, Bm25Retriever, ExpanderKind,
    PoolHit, Recall, RecallConfig, Schedule,
};
use memtree_core::rl::{dapo_term, dynamic_sample_keep, normalize_rewards, ClipParams};
use memtree_core::{
    apply_ops, diff, parse_op_line, parse_op_list, render_op, DeletionMode, GateConfig, MemOp,
    NodePath, PersonaTree, Schema, SchemaPolicy, StoreError, VersionRecord, VersionStore,
};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {{
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($msg)+));
        }
    }};
}

struct Criterion {
    name: &'static str,
    limit: Option<Duration>,
    run: fn() -> Outcome,
}

fn main() -> ExitCode {
    let criteria = [
        Criterion {
            name: "DSL round-trip",
            limit: Some(Duration::from_secs(5)),
            run: dsl_round_trip,
        },
        Criterion {
            name: "Gate oracle equivalence",
            limit: Some(Duration::from_secs(10)),
            run: gate_oracle,
        },
        Criterion {
            name: "Budget & schema closure",
            limit: None,
            run: budget_closure,
        },
        Criterion {
            name: "Replay determinism",
            limit: Some(Duration::from_secs(10)),
            run: replay_determinism,
        },
        Criterion {
            name: "Chunker partition",
            limit: None,
            run: chunker_partition,
        },
        Criterion {
            name: "RL math",
            limit: Some(Duration::from_secs(2)),
            run: rl_math,
        },
        Criterion {
            name: "Context compression",
            limit: None,
            run: context_compression,
        },
        Criterion {
            name: "End-to-end golden run",
            limit: None,
            run: golden_run,
        },
        Criterion {
            name: "Recall determinism",
            limit: None,
            run: recall_determinism,
        },
    ];
    // Failed assertions inside library code should show up as FAIL lines,
    // not as panic backtraces.
    panic::set_hook(Box::new(|_| {}));
    let suite = Instant::now();
    let mut failed = 0;
    for c in &criteria {
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(c.run)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let elapsed = start.elapsed();
        let result = match (result, c.limit) {
            (Ok(_), Some(limit)) if elapsed > limit => {
                Err(format!("took {elapsed:.2?}, limit {limit:?}"))
            }
            (r, _) => r,
        };
        match result {
            Ok(detail) => println!("PASS  {:<26} {:>9.2?}  {detail}", c.name, elapsed),
            Err(why) => {
                failed += 1;
                println!("FAIL  {:<26} {:>9.2?}  {why}", c.name, elapsed);
            }
        }
    }
    let total = suite.elapsed();
    let in_budget = total <= Duration::from_secs(60);
    println!(
        "{}  {:<26} {:>9.2?}  whole suite, offline (limit 60s)",
        if in_budget { "PASS" } else { "FAIL" },
        "Suite wall time",
        total
    );
    if !in_budget {
        failed += 1;
    }
    println!(
        "acceptance: {} of {} criteria passed",
        criteria.len() + 1 - failed,
        criteria.len() + 1
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

// ------------------------------------------------------------------ fixtures

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn read_fixture(name: &str) -> Result<String, String> {
    fs::read_to_string(fixture(name)).map_err(|e| format!("{name}: {e}"))
}

fn update_golden() -> bool {
    std::env::var_os("UPDATE_GOLDEN").is_some()
}

struct FixtureRun {
    _dir: tempfile::TempDir,
    store: VersionStore,
    turns: Vec<DialogueTurn>,
    chunks: Vec<DialogueChunk>,
}

fn run_fixture() -> Result<FixtureRun, String> {
    let turns = normalize_history(&read_fixture("history.jsonl")?).map_err(|e| e.to_string())?;
    let chunks = chunk(&turns, DEFAULT_CHUNK_WINDOW);
    let listener = ScriptedListener::from_json(&read_fixture("listener_script.json")?)
        .map_err(|e| e.to_string())?;
    if let Some(c) = chunks.iter().find(|c| !listener.covers(&c.fingerprint())) {
        return Err(format!(
            "listener script has no reply for chunk {} ({})",
            c.chunk_id,
            c.fingerprint()
        ));
    }
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut store = VersionStore::create(
        dir.path(),
        Arc::new(Schema::default_schema()),
        GateConfig::default(),
    )
    .map_err(|e| e.to_string())?;
    store.set_durable(false);
    store.archive_chunks(&chunks).map_err(|e| e.to_string())?;
    evolve(&mut store, &listener, &chunks, RetryPolicy::none()).map_err(|e| e.to_string())?;
    Ok(FixtureRun {
        _dir: dir,
        store,
        turns,
        chunks,
    })
}

fn fixture_cases() -> Result<Vec<EvalCase>, String> {
    load_cases(&read_fixture("cases.jsonl")?).map_err(|e| e.to_string())
}

// ------------------------------------------------------------ random inputs

const NAME_CHARS: &[u8] = b"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789_-";
const VALUE_CHARS: &[char] = &[
    'a', 'b', 'c', 'x', 'y', 'z', 'Q', '0', '7', ' ', ' ', ' ', '"', '\\', ',', '(', ')', '.', '`',
    '\t', 'é', 'ß', '…', '中', '\u{a0}', '\'', '#', 'N', 'o', 'n', 'e',
];
const WORDS: &[&str] = &[
    "lisbon",
    "turbine",
    "coffee",
    "climbing",
    "cat",
    "sister",
    "rye",
    "bread",
    "train",
    "novel",
    "quiet",
    "morning",
    "storm",
    "engineer",
    "market",
    "knee",
    "tendon",
    "journal",
    "portuguese",
    "sardines",
    "forest",
    "slab",
    "map",
];

fn random_name(rng: &mut StdRng) -> String {
    let len = rng.random_range(1..=12);
    (0..len)
        .map(|_| *NAME_CHARS.choose(rng).expect("non-empty") as char)
        .collect()
}

fn random_path(rng: &mut StdRng) -> NodePath {
    let depth = rng.random_range(2..=6);
    NodePath::new((0..depth).map(|_| random_name(rng))).expect("generated names are valid")
}

fn random_value(rng: &mut StdRng, max_len: usize) -> String {
    let len = rng.random_range(0..=max_len);
    (0..len)
        .map(|_| *VALUE_CHARS.choose(rng).expect("non-empty"))
        .collect()
}

fn random_words(rng: &mut StdRng, max_words: usize) -> String {
    let n = rng.random_range(1..=max_words);
    (0..n)
        .map(|_| *WORDS.choose(rng).expect("non-empty"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn random_op(rng: &mut StdRng) -> MemOp {
    match rng.random_range(0..10) {
        0..=3 => MemOp::Add {
            path: random_path(rng),
            value: random_value(rng, 40),
        },
        4..=6 => MemOp::Update {
            path: random_path(rng),
            value: random_value(rng, 40),
        },
        7 | 8 => MemOp::Delete {
            path: random_path(rng),
        },
        _ => MemOp::NoOp,
    }
}

fn ws(rng: &mut StdRng) -> &'static str {
    ["", "", " ", "  ", "\t"].choose(rng).expect("non-empty")
}

fn escape(v: &str) -> String {
    v.replace('\\', "\\\\").replace('"', "\\\"")
}

/// A meaning-preserving, noisy rendering of `op` as a model might emit it.
fn noisy_line(rng: &mut StdRng, op: &MemOp) -> String {
    let (a, b, c, d, e) = (ws(rng), ws(rng), ws(rng), ws(rng), ws(rng));
    let body = match op {
        MemOp::Add { path, value } => format!("ADD{a}({b}{path}{c},{d}\"{}\"{e})", escape(value)),
        MemOp::Update { path, value } => {
            format!("UPDATE{a}({b}{path}{c},{d}\"{}\"{e})", escape(value))
        }
        MemOp::Delete { path } => {
            if rng.random_bool(0.4) {
                let v = random_value(rng, 20);
                format!("DELETE{a}({b}{path}{c},{d}\"{}\"{e})", escape(&v))
            } else {
                format!("DELETE{a}({b}{path}{c},{d}None{e})")
            }
        }
        MemOp::NoOp => format!("NO_OP{a}({b})"),
    };
    let body = if rng.random_bool(0.15) {
        format!("`{body}`")
    } else {
        body
    };
    format!("{}{body}{}", ws(rng), ws(rng))
}

const NOISE_LINES: &[&str] = &[
    "",
    "   ",
    "```",
    "```text",
    "Here are the operations:",
    "Sure! Based on the dialogue:",
    "- note",
];

// ------------------------------------------------------------- DSL round-trip

fn dsl_round_trip() -> Outcome {
    let mut rng = StdRng::seed_from_u64(0xD51);
    let mut lines = 0;
    for case in 0..1000 {
        let n = rng.random_range(0..20);
        let ops: Vec<MemOp> = (0..n).map(|_| random_op(&mut rng)).collect();
        let canonical = render_ops(&ops);
        let (parsed, diags) = parse_op_list(&canonical);
        ensure!(
            parsed == ops,
            "case {case}: parse(render(x)) != x for\n{canonical}"
        );
        ensure!(
            diags.skipped_count() == 0,
            "case {case}: canonical text produced skipped lines"
        );

        let mut noisy = Vec::new();
        for op in &ops {
            if rng.random_bool(0.2) {
                noisy.push(NOISE_LINES.choose(&mut rng).expect("non-empty").to_string());
            }
            noisy.push(noisy_line(&mut rng, op));
        }
        let y = noisy.join("\n");
        lines += noisy.len();
        let (reparsed, _) = parse_op_list(&y);
        ensure!(
            render_ops(&reparsed) == canonical,
            "case {case}: render(parse(y)) differs from the normalized form of\n{y}"
        );
        ensure!(
            normalize_op_text(&y) == canonical,
            "case {case}: normalize(y) mismatch"
        );
    }
    Ok(format!("1000 op lists, {lines} noisy lines, 0 failures"))
}

// ------------------------------------------------------- random schema model

#[derive(Debug, Clone)]
enum Kind {
    Leaf { budget: usize, default: String },
    Branch { kids: Vec<usize> },
}

#[derive(Debug, Clone)]
struct Node {
    name: String,
    parent: Option<usize>,
    depth: usize,
    kind: Kind,
}

/// A randomly shaped schema kept as an arena, so the test can reason about it
/// without going through the library's schema type.
#[derive(Debug, Clone)]
struct RandSchema {
    nodes: Vec<Node>,
    trunks: Vec<usize>,
}

impl RandSchema {
    fn generate(rng: &mut StdRng, leaves: usize) -> Self {
        let mut s = RandSchema {
            nodes: Vec::new(),
            trunks: Vec::new(),
        };
        let mut counter = 0usize;
        let mut fresh = |rng: &mut StdRng| {
            counter += 1;
            let stem = *["Trait", "area", "Sub-x", "k_", "Node", "v"]
                .choose(rng)
                .expect("non-empty");
            format!("{stem}{counter}")
        };
        let mut count = 0;
        for _ in 0..rng.random_range(2..=3) {
            let name = fresh(rng);
            let t = s.push(rng, name, None, false);
            s.trunks.push(t);
            let leaf = fresh(rng);
            s.push(rng, leaf, Some(t), true);
            count += 1;
        }
        while count < leaves {
            let branches: Vec<usize> = (0..s.nodes.len())
                .filter(|&i| matches!(s.nodes[i].kind, Kind::Branch { .. }))
                .collect();
            let mut parent = *branches.choose(rng).expect("trunks exist");
            if s.nodes[parent].depth < 3 && rng.random_bool(0.3) {
                let name = fresh(rng);
                parent = s.push(rng, name, Some(parent), false);
            }
            let leaf = fresh(rng);
            s.push(rng, leaf, Some(parent), true);
            count += 1;
        }
        s
    }

    fn push(&mut self, rng: &mut StdRng, name: String, parent: Option<usize>, leaf: bool) -> usize {
        let id = self.nodes.len();
        let depth = parent.map_or(1, |p| self.nodes[p].depth + 1);
        let kind = if leaf {
            let budget = rng.random_range(3..=60);
            let default = if rng.random_bool(0.2) {
                format!("d{}", id % 100)
            } else {
                String::new()
            };
            let default = if default.chars().count() <= budget {
                default
            } else {
                String::new()
            };
            Kind::Leaf { budget, default }
        } else {
            Kind::Branch { kids: Vec::new() }
        };
        self.nodes.push(Node {
            name,
            parent,
            depth,
            kind,
        });
        if let Some(p) = parent {
            if let Kind::Branch { kids } = &mut self.nodes[p].kind {
                kids.push(id);
            }
        }
        id
    }

    fn path(&self, mut id: usize) -> String {
        let mut segs = vec![self.nodes[id].name.clone()];
        while let Some(p) = self.nodes[id].parent {
            segs.push(self.nodes[p].name.clone());
            id = p;
        }
        segs.reverse();
        segs.join(".")
    }

    fn to_json(&self) -> String {
        fn node(s: &RandSchema, id: usize) -> Value {
            match &s.nodes[id].kind {
                Kind::Leaf { budget, default } => json!({"$budget": budget, "$default": default}),
                Kind::Branch { kids } => {
                    let mut map = serde_json::Map::new();
                    for &k in kids {
                        map.insert(s.nodes[k].name.clone(), node(s, k));
                    }
                    Value::Object(map)
                }
            }
        }
        let mut tree = serde_json::Map::new();
        for &t in &self.trunks {
            tree.insert(self.nodes[t].name.clone(), node(self, t));
        }
        json!({ "tree": tree }).to_string()
    }

    fn leaf_ids(&self) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| matches!(self.nodes[i].kind, Kind::Leaf { .. }))
            .collect()
    }

    fn branch_ids(&self) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| matches!(self.nodes[i].kind, Kind::Branch { .. }))
            .collect()
    }
}

/// Brute-force reference interpreter: a flat path → text map plus the
/// extension leaves, updated by direct reading of the gate rules.
#[derive(Debug, Clone)]
struct MapModel {
    declared: HashMap<String, (usize, String)>,
    branches: HashMap<String, usize>,
    extensions: BTreeMap<String, BTreeMap<String, (usize, String)>>,
}

fn oracle_truncate(value: &str, budget: usize) -> String {
    let chars: Vec<char> = value.chars().collect();
    if chars.len() <= budget {
        return value.to_string();
    }
    let head: String = chars[..budget - 1].iter().collect();
    let mut kept = head.clone();
    if let Some(pos) = chars[..budget - 1].iter().rposition(|c| c.is_whitespace()) {
        let before: String = chars[..pos].iter().collect();
        let before = before.trim_end();
        if !before.is_empty() {
            kept = before.to_string();
        }
    }
    kept.push('…');
    kept
}

impl MapModel {
    fn new(s: &RandSchema) -> Self {
        let mut declared = HashMap::new();
        let mut branches = HashMap::new();
        for (i, n) in s.nodes.iter().enumerate() {
            match &n.kind {
                Kind::Leaf { budget, default } => {
                    declared.insert(s.path(i), (*budget, default.clone()));
                }
                Kind::Branch { .. } => {
                    branches.insert(s.path(i), n.depth);
                }
            }
        }
        Self {
            declared,
            branches,
            extensions: BTreeMap::new(),
        }
    }

    fn apply(&mut self, op: &MemOp, cfg: &GateConfig) {
        let Some(path) = op.path() else { return };
        if op
            .value()
            .is_some_and(|v| v.contains('\n') || v.contains('\r'))
        {
            return;
        }
        let text = path.to_string();
        let raw = match op {
            MemOp::Add { value, .. } | MemOp::Update { value, .. } => value.clone(),
            MemOp::Delete { .. } => match &cfg.deletion_mode {
                DeletionMode::Clear => String::new(),
                DeletionMode::Marker(m) => m.clone(),
            },
            MemOp::NoOp => return,
        };
        if let Some((budget, slot)) = self.declared.get_mut(&text) {
            let cap = cfg.budget_override.map_or(*budget, |o| o.min(*budget));
            *slot = oracle_truncate(&raw, cap);
            return;
        }
        let (parent, name) = text.rsplit_once('.').expect("paths have two segments");
        if let Some((budget, slot)) = self
            .extensions
            .get_mut(parent)
            .and_then(|m| m.get_mut(name))
        {
            *slot = oracle_truncate(&raw, *budget);
            return;
        }
        if self.branches.contains_key(&text) || !self.branches.contains_key(parent) {
            return;
        }
        let is_add = matches!(op, MemOp::Add { .. });
        if cfg.schema_policy == SchemaPolicy::Extend && is_add && path.depth() <= cfg.max_depth {
            let budget = cfg.budget_override.unwrap_or(500);
            self.extensions
                .entry(parent.to_string())
                .or_default()
                .insert(name.to_string(), (budget, oracle_truncate(&raw, budget)));
        }
    }

    /// (path, value, budget, declared) in the order the tree reports leaves:
    /// declared children of each branch, then its extension leaves by name.
    fn listing(&self, s: &RandSchema) -> Vec<(String, String, usize, bool)> {
        fn walk(
            m: &MapModel,
            s: &RandSchema,
            id: usize,
            out: &mut Vec<(String, String, usize, bool)>,
        ) {
            let path = s.path(id);
            match &s.nodes[id].kind {
                Kind::Leaf { .. } => {
                    let (budget, value) = &m.declared[&path];
                    out.push((path, value.clone(), *budget, true));
                }
                Kind::Branch { kids } => {
                    for &k in kids {
                        walk(m, s, k, out);
                    }
                    if let Some(ext) = m.extensions.get(&path) {
                        for (name, (budget, value)) in ext {
                            out.push((format!("{path}.{name}"), value.clone(), *budget, false));
                        }
                    }
                }
            }
        }
        let mut out = Vec::new();
        for &t in &s.trunks {
            walk(self, s, t, &mut out);
        }
        out
    }
}

fn tree_listing(tree: &PersonaTree) -> Vec<(String, String, usize, bool)> {
    tree.leaves()
        .into_iter()
        .map(|l| {
            (
                l.path.to_string(),
                l.value.to_string(),
                l.budget,
                l.declared,
            )
        })
        .collect()
}

fn random_gate(rng: &mut StdRng, schema: &Schema) -> GateConfig {
    let mut cfg = GateConfig {
        schema_policy: if rng.random_bool(0.5) {
            SchemaPolicy::Strict
        } else {
            SchemaPolicy::Extend
        },
        deletion_mode: if rng.random_bool(0.3) {
            DeletionMode::Marker("[x]".into())
        } else {
            DeletionMode::Clear
        },
        budget_override: if rng.random_bool(0.4) {
            Some(rng.random_range(4..=80))
        } else {
            None
        },
        max_depth: rng.random_range(2..=6),
    };
    if cfg.validate(schema).is_err() {
        cfg.deletion_mode = DeletionMode::Clear;
    }
    cfg
}

fn gate_value(rng: &mut StdRng, allow_newline: bool) -> String {
    let mut v = match rng.random_range(0..4) {
        0 => String::new(),
        1 => random_value(rng, 30),
        _ => random_words(rng, 16),
    };
    if allow_newline && rng.random_bool(0.04) {
        v.push_str("\nsecond line");
    }
    v
}

/// Ops aimed at a schema: mostly declared leaves, plus branches, extension
/// candidates, paths below leaves and unknown branches.
fn schema_op(rng: &mut StdRng, s: &RandSchema, allow_newline: bool) -> MemOp {
    let leaves = s.leaf_ids();
    let branches = s.branch_ids();
    let path_text = match rng.random_range(0..100) {
        0..=54 => s.path(*leaves.choose(rng).expect("leaves")),
        55..=64 => {
            let deep: Vec<usize> = branches
                .iter()
                .copied()
                .filter(|&b| s.nodes[b].depth >= 2)
                .collect();
            match deep.choose(rng) {
                Some(&b) => s.path(b),
                None => s.path(*leaves.choose(rng).expect("leaves")),
            }
        }
        65..=84 => {
            let b = *branches.choose(rng).expect("branches");
            format!("{}.ext{}", s.path(b), rng.random_range(0..3))
        }
        85..=92 => format!("{}.below", s.path(*leaves.choose(rng).expect("leaves"))),
        _ => format!("Unknown{}.leaf", rng.random_range(0..3)),
    };
    let path: NodePath = path_text.parse().expect("generated paths are valid");
    match rng.random_range(0..100) {
        0..=34 => MemOp::Add {
            path,
            value: gate_value(rng, allow_newline),
        },
        35..=64 => MemOp::Update {
            path,
            value: gate_value(rng, allow_newline),
        },
        65..=84 => MemOp::Delete { path },
        _ => MemOp::NoOp,
    }
}

struct GateRun {
    schema: RandSchema,
    lib_schema: Arc<Schema>,
    cfg: GateConfig,
    ops: Vec<MemOp>,
}

fn gate_runs() -> impl Iterator<Item = GateRun> {
    let mut rng = StdRng::seed_from_u64(0x6A7E);
    (0..1000).map(move |_| {
        let schema = RandSchema::generate(&mut rng, 30);
        let lib_schema =
            Arc::new(Schema::from_json(&schema.to_json()).expect("generated schema loads"));
        let cfg = random_gate(&mut rng, &lib_schema);
        let n = rng.random_range(1..=40);
        let ops = (0..n).map(|_| schema_op(&mut rng, &schema, true)).collect();
        GateRun {
            schema,
            lib_schema,
            cfg,
            ops,
        }
    })
}

fn gate_oracle() -> Outcome {
    let mut ops_total = 0;
    let mut rejected = 0;
    let mut truncated = 0;
    for (case, run) in gate_runs().enumerate() {
        ensure!(
            run.lib_schema.leaf_count() == 30,
            "case {case}: schema has {} leaves",
            run.lib_schema.leaf_count()
        );
        let mut model = MapModel::new(&run.schema);
        let mut tree = PersonaTree::new(run.lib_schema.clone());
        ensure!(
            tree_listing(&tree) == model.listing(&run.schema),
            "case {case}: initial trees differ"
        );
        for (i, op) in run.ops.iter().enumerate() {
            let (next, report) = apply_ops(&tree, std::slice::from_ref(op), &run.cfg);
            model.apply(op, &run.cfg);
            ensure!(
                tree_listing(&next) == model.listing(&run.schema),
                "case {case}: after op {i} `{}` with {:?} the tree differs from the reference map",
                render_op(op),
                run.cfg
            );
            rejected += report.rejected.len();
            truncated += report.truncated.len();
            tree = next;
        }
        let (batch, _) = apply_ops(
            &PersonaTree::new(run.lib_schema.clone()),
            &run.ops,
            &run.cfg,
        );
        ensure!(
            batch == tree,
            "case {case}: batch apply differs from op-by-op apply"
        );
        ops_total += run.ops.len();
    }
    Ok(format!(
        "1000 sequences, {ops_total} ops ({rejected} rejected, {truncated} truncated), 0 mismatches"
    ))
}

/// Leaf lengths within the effective budget, and in strict mode exactly the
/// declared leaf set.
fn closure_violation(tree: &PersonaTree, cfg: &GateConfig) -> Option<String> {
    for leaf in tree.leaves() {
        let budget = if leaf.declared {
            cfg.declared_budget(leaf.budget)
        } else {
            leaf.budget
        };
        let len = leaf.value.chars().count();
        let is_default = tree
            .schema()
            .leaf(&leaf.path)
            .is_some_and(|spec| spec.default == leaf.value);
        if len > budget && !is_default {
            return Some(format!(
                "{} holds {len} chars over budget {budget}",
                leaf.path
            ));
        }
    }
    if cfg.schema_policy == SchemaPolicy::Strict {
        let declared: Vec<&NodePath> = tree.schema().leaves().iter().map(|l| &l.path).collect();
        let present: Vec<NodePath> = tree.leaves().into_iter().map(|l| l.path).collect();
        if present.len() != declared.len() || present.iter().zip(&declared).any(|(a, b)| a != *b) {
            return Some("strict-mode leaf set changed".into());
        }
    }
    None
}

fn budget_closure() -> Outcome {
    let mut states = 0;
    for (case, run) in gate_runs().enumerate() {
        let mut tree = PersonaTree::new(run.lib_schema.clone());
        for (i, op) in run.ops.iter().enumerate() {
            tree = apply_ops(&tree, std::slice::from_ref(op), &run.cfg).0;
            states += 1;
            if let Some(v) = closure_violation(&tree, &run.cfg) {
                return Err(format!("case {case}, after op {i}: {v}"));
            }
        }
    }
    let fixture = run_fixture()?;
    let gate = fixture.store.gate_config().clone();
    for v in 0..=fixture.store.head_id() {
        let tree = fixture.store.tree_at(v).map_err(|e| e.to_string())?;
        states += 1;
        if let Some(why) = closure_violation(&tree, &gate) {
            return Err(format!("fixture version {v}: {why}"));
        }
    }
    Ok(format!(
        "{states} intermediate states checked, 0 violations"
    ))
}

// ------------------------------------------------------------ replay

const LOG_FILE: &str = "versions.jsonl";

struct Evolution {
    schema: Arc<Schema>,
    gate: GateConfig,
    chunks: Vec<DialogueChunk>,
    listener: ScriptedListener,
}

fn random_evolution(rng: &mut StdRng, index: usize) -> Evolution {
    let leaves = rng.random_range(8..=30);
    let rs = RandSchema::generate(rng, leaves);
    let schema = Arc::new(Schema::from_json(&rs.to_json()).expect("generated schema loads"));
    let gate = random_gate(rng, &schema);
    let turn_count = rng.random_range(2..=30);
    let turns: Vec<DialogueTurn> = (0..turn_count)
        .map(|t| {
            let role = if t % 2 == 0 {
                Role::User
            } else {
                Role::Assistant
            };
            DialogueTurn::new(role, format!("e{index} t{t}: {}", random_words(rng, 12)))
        })
        .collect();
    let w = *[1usize, 3, 5].choose(rng).expect("non-empty");
    let chunks = chunk(&turns, w);
    let mut replies = HashMap::new();
    for c in &chunks {
        let n = rng.random_range(0..=6);
        let mut lines: Vec<String> = (0..n)
            .map(|_| render_op(&schema_op(rng, &rs, false)))
            .collect();
        if rng.random_bool(0.2) {
            lines.insert(0, "Here are the operations:".into());
        }
        if lines.is_empty() {
            lines.push("NO_OP()".into());
        }
        replies.insert(c.fingerprint(), lines.join("\n"));
    }
    Evolution {
        schema,
        gate,
        chunks,
        listener: ScriptedListener::new(replies),
    }
}

fn run_evolution(ev: &Evolution, dir: &Path) -> Result<VersionStore, String> {
    let mut store =
        VersionStore::create(dir, ev.schema.clone(), ev.gate.clone()).map_err(|e| e.to_string())?;
    store.set_durable(false);
    evolve(&mut store, &ev.listener, &ev.chunks, RetryPolicy::none()).map_err(|e| e.to_string())?;
    Ok(store)
}

fn read_log(dir: &Path) -> Result<Vec<VersionRecord>, String> {
    fs::read_to_string(dir.join(LOG_FILE))
        .map_err(|e| e.to_string())?
        .lines()
        .map(|l| serde_json::from_str(l).map_err(|e| e.to_string()))
        .collect()
}

fn write_log(dir: &Path, records: &[VersionRecord]) -> Result<(), String> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).map_err(|e| e.to_string())?);
        text.push('\n');
    }
    fs::write(dir.join(LOG_FILE), text).map_err(|e| e.to_string())
}

/// Rewrites one op of `record` so that replay must produce a different tree.
/// Returns false when no op of this version can be corrupted visibly.
fn corrupt(record: &mut VersionRecord, parent: &PersonaTree, gate: &GateConfig) -> bool {
    for i in (0..record.ops.len()).rev() {
        let Ok(op) = parse_op_line(&record.ops[i]) else {
            continue;
        };
        let tampered = match op {
            MemOp::Add { path, value } => MemOp::Add {
                path,
                value: format!("TAMPERED {value}"),
            },
            MemOp::Update { path, value } => MemOp::Update {
                path,
                value: format!("TAMPERED {value}"),
            },
            _ => continue,
        };
        let mut lines = record.ops.clone();
        lines[i] = render_op(&tampered);
        let ops: Vec<MemOp> = lines.iter().filter_map(|l| parse_op_line(l).ok()).collect();
        if apply_ops(parent, &ops, gate).0.digest() != record.digest {
            record.ops = lines;
            return true;
        }
    }
    false
}

fn replay_determinism() -> Outcome {
    let mut rng = StdRng::seed_from_u64(0x5E71A7);
    let mut versions = 0;
    let mut tampered = 0;
    for case in 0..100 {
        let ev = random_evolution(&mut rng, case);
        let a = tempfile::tempdir().map_err(|e| e.to_string())?;
        let b = tempfile::tempdir().map_err(|e| e.to_string())?;
        let store = run_evolution(&ev, a.path())?;
        let twin = run_evolution(&ev, b.path())?;
        let head = store.head_id();
        versions += head as usize + 1;
        let chain: Vec<_> = store.records().iter().map(|r| r.digest.clone()).collect();
        let twin_chain: Vec<_> = twin.records().iter().map(|r| r.digest.clone()).collect();
        ensure!(
            chain == twin_chain,
            "case {case}: identical inputs produced different digest chains"
        );
        drop(store);

        let reopened = VersionStore::open_read_only(a.path()).map_err(|e| e.to_string())?;
        let replayed = reopened
            .replay(0, head)
            .map_err(|e| format!("case {case}: {e}"))?;
        ensure!(
            replayed.digest() == reopened.head_record().digest,
            "case {case}: replay(0, {head}) digest differs from head"
        );
        let verified = reopened
            .verify()
            .map_err(|e| format!("case {case}: verify: {e}"))?;
        ensure!(
            verified == head as usize + 1,
            "case {case}: verified {verified} of {} versions",
            head + 1
        );

        // Tamper with one or two versions; replay must stop at the first.
        let mut records = read_log(a.path())?;
        let mut order: Vec<u64> = (1..=head).collect();
        order.shuffle(&mut rng);
        let mut corrupted = Vec::new();
        for v in order {
            let parent = reopened.tree_at(v - 1).map_err(|e| e.to_string())?;
            if corrupt(&mut records[v as usize], &parent, reopened.gate_config()) {
                corrupted.push(v);
                if corrupted.len() == 2 || rng.random_bool(0.5) {
                    break;
                }
            }
        }
        let Some(&first) = corrupted.iter().min() else {
            continue;
        };
        write_log(a.path(), &records)?;
        let broken = VersionStore::open_read_only(a.path()).map_err(|e| e.to_string())?;
        match broken.replay(0, head) {
            Err(StoreError::ReplayMismatch { version, .. }) => ensure!(
                version == first,
                "case {case}: corrupted {corrupted:?} but replay flagged version {version}"
            ),
            other => {
                return Err(format!(
                    "case {case}: corrupted {corrupted:?}, replay returned {other:?}"
                ))
            }
        }
        if first > 1 {
            ensure!(
                broken.replay(0, first - 1).is_ok(),
                "case {case}: versions before the corruption no longer replay"
            );
        }
        tampered += 1;
    }
    ensure!(
        tampered >= 50,
        "only {tampered} evolutions had a corruptible version"
    );
    Ok(format!(
        "100 evolutions ({versions} versions) replay to their head digest; {tampered} tamper injections each flagged at the first corrupted version"
    ))
}

// ------------------------------------------------------------ chunker

fn chunker_partition() -> Outcome {
    let mut rng = StdRng::seed_from_u64(0xC4);
    let mut transcripts: Vec<Vec<DialogueTurn>> = (0..200)
        .map(|i| {
            let n = rng.random_range(0..=80);
            (0..n)
                .map(|t| {
                    let role = if rng.random_bool(0.5) {
                        Role::User
                    } else {
                        Role::Assistant
                    };
                    DialogueTurn::new(role, format!("{i}/{t} {}", random_words(&mut rng, 8)))
                })
                .collect()
        })
        .collect();
    let fixture_turns =
        normalize_history(&read_fixture("history.jsonl")?).map_err(|e| e.to_string())?;
    transcripts.push(fixture_turns);
    let grid = [1usize, 3, 5, 7, 10, 13, 15];
    for w in grid {
        for (i, turns) in transcripts.iter().enumerate() {
            let chunks = chunk(turns, w);
            let joined: Vec<DialogueTurn> = chunks.iter().flat_map(|c| c.turns.clone()).collect();
            ensure!(
                &joined == turns,
                "w={w}, transcript {i}: concatenation differs"
            );
            ensure!(
                chunks
                    .iter()
                    .all(|c| !c.turns.is_empty() && c.turns.len() <= w),
                "w={w}, transcript {i}: chunk size out of range"
            );
            ensure!(
                chunks.iter().zip(1u64..).all(|(c, id)| c.chunk_id == id),
                "w={w}, transcript {i}: chunk ids are not 1..n"
            );
            ensure!(
                chunks.len() == turns.len().div_ceil(w),
                "w={w}, transcript {i}: not a greedy partition"
            );
        }
    }
    Ok(format!(
        "{} transcripts × w ∈ {grid:?}: exact partitions",
        transcripts.len()
    ))
}

// ------------------------------------------------------------ RL math

fn rl_math() -> Outcome {
    let mut rng = StdRng::seed_from_u64(0x4D);
    let mut groups = 0;
    while groups < 10_000 {
        let rewards: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let adv = normalize_rewards(&rewards).map_err(|e| e.to_string())?;
        // Moments recomputed here, independently of the library helpers.
        let n = adv.len() as f64;
        let m = adv.iter().sum::<f64>() / n;
        let sd = (adv.iter().map(|a| (a - m).powi(2)).sum::<f64>() / n).sqrt();
        ensure!(m.abs() <= 1e-9, "group {groups}: mean {m:e}");
        ensure!((sd - 1.0).abs() <= 1e-9, "group {groups}: std {sd}");
        groups += 1;
    }
    let clip = ClipParams::default();
    let hi = dapo_term(2.0, 1.0, clip);
    let lo = dapo_term(0.5, -1.0, clip);
    ensure!(hi == 1.28, "dapo_term(2.0, 1) = {hi}, expected 1.28");
    ensure!(lo == -0.8, "dapo_term(0.5, -1) = {lo}, expected -0.8");
    ensure!(!dynamic_sample_keep(&[true; 8]), "all-correct group kept");
    ensure!(!dynamic_sample_keep(&[false; 8]), "all-wrong group kept");
    ensure!(
        dynamic_sample_keep(&[true, false, false, false, false, false, false, false]),
        "mixed group dropped"
    );
    ensure!(
        normalize_rewards(&[0.5; 8]).is_err(),
        "degenerate group normalized"
    );
    Ok("10000 groups at mean 0 / std 1 (±1e-9); 1.28 and -0.8 exact; keep rule holds".into())
}

// ------------------------------------------------------------ context

fn context_compression() -> Outcome {
    let raw = read_fixture("history.jsonl")?;
    let mut history_chars = 0usize;
    let mut turns = 0usize;
    for line in raw.lines().filter(|l| !l.trim().is_empty()) {
        let v: Value = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let text = v["text"].as_str().ok_or("history record without text")?;
        history_chars += text.chars().count();
        turns += 1;
    }
    ensure!(turns >= 60, "fixture history has only {turns} turns");
    let fixture = run_fixture()?;
    ensure!(
        fixture.turns.len() == turns,
        "normalized turn count differs from the file"
    );
    let tree = fixture.store.head_tree().map_err(|e| e.to_string())?;
    let mut worst = 0usize;
    for case in fixture_cases()? {
        worst = worst.max(fast_context(&tree, &case.question).chars().count());
    }
    let ratio = worst as f64 / history_chars as f64;
    ensure!(
        ratio <= 0.15,
        "fast context {worst} chars vs history {history_chars} chars: ratio {ratio:.4} > 0.15"
    );
    Ok(format!(
        "{turns} turns, history {history_chars} chars, largest fast context {worst} chars, ratio {ratio:.4} ≤ 0.15"
    ))
}

// ------------------------------------------------------------ golden run

fn golden_diffs(store: &VersionStore) -> Result<Value, String> {
    let mut out = Vec::new();
    for v in 1..=store.head_id() {
        let before = store.tree_at(v - 1).map_err(|e| e.to_string())?;
        let after = store.tree_at(v).map_err(|e| e.to_string())?;
        let record = store.record(v).map_err(|e| e.to_string())?;
        out.push(json!({
            "version": v,
            "chunk_id": record.chunk_id,
            "changes": diff(&before, &after),
        }));
    }
    Ok(Value::Array(out))
}

fn check_golden_text(name: &str, actual: &str) -> Result<(), String> {
    let path = fixture(name);
    if update_golden() {
        return fs::write(&path, actual).map_err(|e| format!("{name}: {e}"));
    }
    let expected = read_fixture(name)?;
    if expected != actual {
        let line = expected
            .lines()
            .zip(actual.lines())
            .position(|(a, b)| a != b)
            .map_or_else(|| "length".to_string(), |i| format!("line {}", i + 1));
        return Err(format!("{name} differs from the golden file at {line}"));
    }
    Ok(())
}

fn check_golden_json(name: &str, actual: &Value) -> Result<(), String> {
    let mut text = serde_json::to_string_pretty(actual).map_err(|e| e.to_string())?;
    text.push('\n');
    if update_golden() {
        return fs::write(fixture(name), text).map_err(|e| format!("{name}: {e}"));
    }
    let expected: Value =
        serde_json::from_str(&read_fixture(name)?).map_err(|e| format!("{name}: {e}"))?;
    ensure!(&expected == actual, "{name} differs from the golden file");
    Ok(())
}

fn eval_with(
    fixture: &FixtureRun,
    answerer: &dyn memtree_core::client::ChatClient,
) -> Result<EvalReport, String> {
    let cases = fixture_cases()?;
    let tree = fixture.store.head_tree().map_err(|e| e.to_string())?;
    let retriever = Bm25Retriever::from_chunks(&fixture.chunks);
    let config = RecallConfig::default();
    let recall = Recall {
        retriever: &retriever,
        reranker: &retriever,
        answerer,
        helper: None,
        config: &config,
    };
    Ok(run_eval(&cases, &recall, &tree))
}

fn golden_run() -> Outcome {
    let fixture = run_fixture()?;
    let store = &fixture.store;
    ensure!(
        store.head_id() as usize == fixture.chunks.len(),
        "{} chunks but head is version {}",
        fixture.chunks.len(),
        store.head_id()
    );
    let verified = store.verify().map_err(|e| e.to_string())?;
    let tree = store.head_tree().map_err(|e| e.to_string())?;
    check_golden_text("golden_tree.txt", &tree.to_prompt_compact())?;
    check_golden_json("golden_diffs.json", &golden_diffs(store)?)?;

    // Key distribution read straight from the case file.
    let raw_cases = read_fixture("cases.jsonl")?;
    let keys: Vec<String> = raw_cases
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str::<Value>(l).map(|v| v["answer"].as_str().unwrap_or("").to_string())
        })
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let a_fraction = keys.iter().filter(|k| *k == "A").count() as f64 / keys.len() as f64;

    let cases = fixture_cases()?;
    let oracle = OracleClient::new(&cases);
    let oracle_report = eval_with(&fixture, &oracle)?;
    ensure!(
        oracle_report.accuracy == 1.0,
        "oracle accuracy {}",
        oracle_report.accuracy
    );

    let fixed_a = MockChatClient::fixed("A");
    let report = eval_with(&fixture, &fixed_a)?;
    let again = eval_with(&fixture, &fixed_a)?;
    ensure!(report == again, "fixed-answer eval is not deterministic");
    ensure!(
        report.accuracy == a_fraction,
        "fixed-\"A\" accuracy {} but the A-key fraction is {a_fraction}",
        report.accuracy
    );
    check_golden_json(
        "golden_eval.json",
        &serde_json::to_value(&report).map_err(|e| e.to_string())?,
    )?;
    let agentic = report
        .cases
        .iter()
        .filter(|c| c.mode.to_string() == "agentic")
        .count();
    Ok(format!(
        "{} versions verified; golden tree/diffs/report match; oracle 1.0, fixed-A {:.2} = A-key share; {agentic}/{} routed agentic{}",
        verified,
        report.accuracy,
        report.total,
        if update_golden() { " (golden files rewritten)" } else { "" }
    ))
}

// ------------------------------------------------------------ recall

fn recall_determinism() -> Outcome {
    let fixture = run_fixture()?;
    let tree = fixture.store.head_tree().map_err(|e| e.to_string())?;
    let retriever = Bm25Retriever::from_chunks(&fixture.chunks);
    let cases = fixture_cases()?;
    let mut compared = 0;
    for case in &cases {
        let queries =
            expand_queries(&case.question, &tree, 3, ExpanderKind::Template, None).queries;
        let seq = serde_json::to_string(&retrieve_parallel(
            &retriever,
            &queries,
            4,
            Schedule::Sequential,
        ))
        .map_err(|e| e.to_string())?;
        for _ in 0..5 {
            let conc = serde_json::to_string(&retrieve_parallel(
                &retriever,
                &queries,
                4,
                Schedule::Concurrent,
            ))
            .map_err(|e| e.to_string())?;
            ensure!(
                seq == conc,
                "case {}: concurrent pool differs from sequential",
                case.id
            );
            compared += 1;
        }
    }

    let mut rng = StdRng::seed_from_u64(0xF05E);
    let questions: Vec<&str> = cases.iter().map(|c| c.question.as_str()).collect();
    let mut truncated = 0;
    for i in 0..1000 {
        let n = rng.random_range(0..=24);
        let pool: Vec<PoolHit> = (0..n)
            .map(|_| {
                let len = rng.random_range(0..=2500);
                let mut text = random_words(&mut rng, 400);
                text = text.chars().take(len).collect();
                PoolHit {
                    chunk_id: rng.random_range(1..=30),
                    text,
                    score: rng.random_range(0.0..20.0),
                    query_index: rng.random_range(0..4),
                }
            })
            .collect();
        let q = if rng.random_bool(0.7) {
            questions.choose(&mut rng).expect("cases").to_string()
        } else {
            random_words(&mut rng, 6)
        };
        let limit = rng.random_range(1..=8);
        let budget = rng.random_range(0..=6000);
        let fused = rerank_fuse(&q, &pool, &retriever, limit, budget);
        let chars: usize = fused.snippets.iter().map(|s| s.text.chars().count()).sum();
        ensure!(
            fused.total_chars <= budget,
            "pool {i}: {} chars over budget {budget}",
            fused.total_chars
        );
        ensure!(
            chars == fused.total_chars,
            "pool {i}: total_chars {} but snippets hold {chars}",
            fused.total_chars
        );
        ensure!(
            fused.snippets.len() <= limit,
            "pool {i}: {} snippets over limit {limit}",
            fused.snippets.len()
        );
        let ids: HashSet<u64> = fused.snippets.iter().map(|s| s.chunk_id).collect();
        ensure!(
            ids.len() == fused.snippets.len(),
            "pool {i}: duplicate chunk ids"
        );
        ensure!(
            ids.iter().all(|id| pool.iter().any(|h| h.chunk_id == *id)),
            "pool {i}: snippet from outside the pool"
        );
        ensure!(
            fused == rerank_fuse(&q, &pool, &retriever, limit, budget),
            "pool {i}: fusion not deterministic"
        );
        if fused.total_chars == budget && budget > 0 {
            truncated += 1;
        }
    }
    Ok(format!(
        "{compared} concurrent/sequential pool pairs byte-equal; 1000 random pools within budget and limit, no duplicate ids ({truncated} filled the budget)"
    ))
}
