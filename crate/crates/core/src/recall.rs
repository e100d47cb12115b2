//! Answer-time context assembly: fast mode (tree outline plus query), a gated
//! router, query expansion, parallel lexical retrieval over archived chunks,
//! rerank-and-fuse, and the final answer call.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::thread;

use serde::{Deserialize, Serialize};

use crate::client::{ChatClient, ChatRequest, ClientError};
use crate::ingest::DialogueChunk;
use crate::schema::SchemaNode;
use crate::tree::PersonaTree;

/// Separates the tree outline from the query in fast-mode context.
pub const QUERY_DELIMITER: &str = "\n\n=== Query ===\n";
/// Heads the block of retrieved excerpts appended in agentic mode.
pub const FUSED_HEADER: &str = "\n\n=== Retrieved dialogue ===";

pub const DEFAULT_EXPANSIONS: usize = 3;
pub const DEFAULT_TOP_K: usize = 4;
pub const DEFAULT_FUSE_LIMIT: usize = 4;
pub const DEFAULT_FUSION_BUDGET: usize = 4000;

/// Lowercased alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub chunk_id: u64,
    pub text: String,
    pub score: f64,
}

fn by_score_then_id(a_score: f64, a_id: u64, b_score: f64, b_id: u64) -> std::cmp::Ordering {
    b_score.total_cmp(&a_score).then(a_id.cmp(&b_id))
}

pub trait Retriever: Send + Sync {
    /// Replaces the index with `chunks`.
    fn index(&mut self, chunks: &[DialogueChunk]);
    /// At most `k` hits, by descending score then ascending chunk id.
    fn search(&self, query: &str, k: usize) -> Vec<Hit>;
}

pub trait Reranker: Send + Sync {
    fn score(&self, query: &str, text: &str) -> f64;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 1.2, b: 0.75 }
    }
}

#[derive(Debug, Clone)]
struct IndexedDoc {
    chunk_id: u64,
    text: String,
    tf: HashMap<String, u32>,
    len: usize,
}

/// Okapi BM25 over rendered chunks.
#[derive(Debug, Clone, Default)]
pub struct Bm25Retriever {
    params: Bm25Params,
    docs: Vec<IndexedDoc>,
    df: HashMap<String, usize>,
    avgdl: f64,
}

fn term_counts(tokens: Vec<String>) -> (HashMap<String, u32>, usize) {
    let len = tokens.len();
    let mut tf = HashMap::new();
    for t in tokens {
        *tf.entry(t).or_insert(0) += 1;
    }
    (tf, len)
}

/// Distinct terms in first-occurrence order, so sums are order-stable.
fn distinct_terms(text: &str) -> Vec<String> {
    let mut seen = HashSet::new();
    tokenize(text)
        .into_iter()
        .filter(|t| seen.insert(t.clone()))
        .collect()
}

impl Bm25Retriever {
    pub fn new(params: Bm25Params) -> Self {
        Self {
            params,
            ..Self::default()
        }
    }

    pub fn from_chunks(chunks: &[DialogueChunk]) -> Self {
        let mut r = Self::new(Bm25Params::default());
        r.index(chunks);
        r
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.docs.len() as f64;
        let df = self.df.get(term).copied().unwrap_or(0) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    fn score_counts(&self, terms: &[String], tf: &HashMap<String, u32>, len: usize) -> f64 {
        let Bm25Params { k1, b } = self.params;
        let avgdl = if self.avgdl > 0.0 { self.avgdl } else { 1.0 };
        let norm = k1 * (1.0 - b + b * len as f64 / avgdl);
        terms
            .iter()
            .filter_map(|t| tf.get(t).map(|&f| (t, f as f64)))
            .map(|(t, f)| self.idf(t) * f * (k1 + 1.0) / (f + norm))
            .sum()
    }
}

impl Retriever for Bm25Retriever {
    fn index(&mut self, chunks: &[DialogueChunk]) {
        self.docs = chunks
            .iter()
            .map(|c| {
                let text = c.render();
                let (tf, len) = term_counts(tokenize(&text));
                IndexedDoc {
                    chunk_id: c.chunk_id,
                    text,
                    tf,
                    len,
                }
            })
            .collect();
        self.df.clear();
        for doc in &self.docs {
            for term in doc.tf.keys() {
                *self.df.entry(term.clone()).or_insert(0) += 1;
            }
        }
        let total: usize = self.docs.iter().map(|d| d.len).sum();
        self.avgdl = if self.docs.is_empty() {
            0.0
        } else {
            total as f64 / self.docs.len() as f64
        };
    }

    fn search(&self, query: &str, k: usize) -> Vec<Hit> {
        let terms = distinct_terms(query);
        let mut hits: Vec<Hit> = self
            .docs
            .iter()
            .filter_map(|d| {
                let score = self.score_counts(&terms, &d.tf, d.len);
                (score > 0.0).then(|| Hit {
                    chunk_id: d.chunk_id,
                    text: d.text.clone(),
                    score,
                })
            })
            .collect();
        hits.sort_by(|a, b| by_score_then_id(a.score, a.chunk_id, b.score, b.chunk_id));
        hits.truncate(k);
        hits
    }
}

impl Reranker for Bm25Retriever {
    /// Scores arbitrary text with the indexed corpus statistics.
    fn score(&self, query: &str, text: &str) -> f64 {
        let (tf, len) = term_counts(tokenize(text));
        self.score_counts(&distinct_terms(query), &tf, len)
    }
}

/// Tree outline, delimiter, query.
pub fn fast_context(tree: &PersonaTree, q: &str) -> String {
    let outline = tree.to_prompt_compact();
    let mut out = String::with_capacity(outline.len() + QUERY_DELIMITER.len() + q.len());
    out.push_str(outline.trim_end_matches('\n'));
    out.push_str(QUERY_DELIMITER);
    out.push_str(q);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnswerMode {
    Fast,
    Agentic,
}

impl std::fmt::Display for AnswerMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AnswerMode::Fast => "fast",
            AnswerMode::Agentic => "agentic",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteDecision {
    pub mode: AnswerMode,
    pub reason: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterKind {
    #[default]
    Heuristic,
    Llm,
}

pub const DEFAULT_MARKERS: &[&str] = &[
    "tell me more",
    "more detail",
    "in detail",
    "elaborate",
    "specifically",
    "what exactly",
    "exact words",
    "remind me",
    "last time",
    "earlier conversation",
];

const STOPWORDS: &[&str] = &[
    "a",
    "about",
    "above",
    "after",
    "again",
    "against",
    "all",
    "also",
    "am",
    "an",
    "and",
    "any",
    "are",
    "as",
    "at",
    "be",
    "because",
    "been",
    "before",
    "being",
    "below",
    "between",
    "both",
    "but",
    "by",
    "can",
    "could",
    "did",
    "do",
    "does",
    "doing",
    "down",
    "during",
    "each",
    "else",
    "even",
    "ever",
    "every",
    "few",
    "for",
    "from",
    "further",
    "get",
    "give",
    "had",
    "has",
    "have",
    "having",
    "he",
    "her",
    "here",
    "hers",
    "herself",
    "him",
    "himself",
    "his",
    "how",
    "i",
    "if",
    "in",
    "into",
    "is",
    "it",
    "its",
    "itself",
    "just",
    "know",
    "like",
    "make",
    "me",
    "might",
    "mine",
    "more",
    "most",
    "much",
    "must",
    "my",
    "myself",
    "need",
    "no",
    "nor",
    "not",
    "now",
    "of",
    "off",
    "on",
    "once",
    "one",
    "only",
    "or",
    "other",
    "ought",
    "our",
    "ours",
    "ourselves",
    "out",
    "over",
    "own",
    "please",
    "really",
    "same",
    "say",
    "shall",
    "she",
    "should",
    "so",
    "some",
    "such",
    "tell",
    "than",
    "that",
    "the",
    "their",
    "theirs",
    "them",
    "themselves",
    "then",
    "there",
    "these",
    "they",
    "thing",
    "things",
    "think",
    "this",
    "those",
    "through",
    "to",
    "too",
    "under",
    "until",
    "up",
    "us",
    "very",
    "want",
    "was",
    "we",
    "well",
    "were",
    "what",
    "when",
    "where",
    "which",
    "while",
    "who",
    "whom",
    "whose",
    "why",
    "will",
    "with",
    "would",
    "you",
    "your",
    "yours",
    "yourself",
    "yourselves",
];

pub fn is_stopword(token: &str) -> bool {
    STOPWORDS.binary_search(&token).is_ok()
}

/// Minimum length (chars) for a query token to count as a content term.
pub const MIN_CONTENT_TERM: usize = 4;

pub fn content_terms(q: &str) -> Vec<String> {
    distinct_terms(q)
        .into_iter()
        .filter(|t| t.chars().count() >= MIN_CONTENT_TERM && !is_stopword(t))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouterConfig {
    pub kind: RouterKind,
    pub markers: Vec<String>,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            kind: RouterKind::Heuristic,
            markers: DEFAULT_MARKERS.iter().map(|m| m.to_string()).collect(),
        }
    }
}

fn normalize_ws_lower(text: &str) -> String {
    text.split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase()
}

/// Offline rule: agentic on a detail marker or on any content term that
/// occurs in no leaf value.
pub fn route_heuristic(q: &str, tree: &PersonaTree, markers: &[String]) -> RouteDecision {
    let lowered = normalize_ws_lower(q);
    if let Some(m) = markers
        .iter()
        .find(|m| !m.trim().is_empty() && lowered.contains(&normalize_ws_lower(m)))
    {
        return RouteDecision {
            mode: AnswerMode::Agentic,
            reason: format!("detail marker {:?}", m.trim()),
        };
    }
    let vocab: HashSet<String> = tree
        .populated()
        .into_iter()
        .flat_map(|leaf| tokenize(leaf.value))
        .collect();
    if let Some(term) = content_terms(q).into_iter().find(|t| !vocab.contains(t)) {
        return RouteDecision {
            mode: AnswerMode::Agentic,
            reason: format!("term {term:?} not in memory"),
        };
    }
    RouteDecision {
        mode: AnswerMode::Fast,
        reason: "query covered by memory".into(),
    }
}

const ROUTER_PROMPT: &str = "Decide whether the question below can be answered from the persona memory alone, or needs details from the raw conversation history.\n\nPersona memory:\n{outline}\n\nQuestion: {q}\n\nReply with one word: \"yes\" if the raw history is needed, otherwise \"no\".";

pub fn route(
    q: &str,
    tree: &PersonaTree,
    cfg: &RouterConfig,
    client: Option<&dyn ChatClient>,
) -> RouteDecision {
    let client = match (cfg.kind, client) {
        (RouterKind::Llm, Some(c)) => c,
        (RouterKind::Llm, None) => {
            let mut d = route_heuristic(q, tree, &cfg.markers);
            d.reason = format!("no router client, heuristic: {}", d.reason);
            return d;
        }
        (RouterKind::Heuristic, _) => return route_heuristic(q, tree, &cfg.markers),
    };
    let prompt = ROUTER_PROMPT
        .replacen("{outline}", tree.to_prompt_compact().trim_end(), 1)
        .replacen("{q}", q, 1);
    let verdict = client.complete(&ChatRequest::new(prompt)).map(|reply| {
        let word = reply
            .trim_start()
            .split(|c: char| !c.is_alphabetic())
            .next()
            .unwrap_or("")
            .to_lowercase();
        match word.as_str() {
            "yes" => Some(AnswerMode::Agentic),
            "no" => Some(AnswerMode::Fast),
            _ => None,
        }
    });
    match verdict {
        Ok(Some(mode)) => RouteDecision {
            mode,
            reason: "router model".into(),
        },
        Ok(None) => {
            let mut d = route_heuristic(q, tree, &cfg.markers);
            d.reason = format!("unparseable router reply, heuristic: {}", d.reason);
            d
        }
        Err(e) => {
            log::warn!("router call failed, using heuristic: {e}");
            let mut d = route_heuristic(q, tree, &cfg.markers);
            d.reason = format!("router unavailable, heuristic: {}", d.reason);
            d
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Expansion {
    /// `queries[0]` is always the original query.
    pub queries: Vec<String>,
    pub degraded: bool,
}

fn humanize(name: &str) -> String {
    name.trim_start_matches(|c: char| c.is_ascii_digit() || c == '_')
        .replace(['_', '-'], " ")
}

/// `K` rewrites slanted by (trunk, branch) pairs in schema order; pairwise
/// distinct for any `K`.
pub fn template_expansions(q: &str, tree: &PersonaTree, k: usize) -> Vec<String> {
    let mut aspects = Vec::new();
    for (trunk, node) in tree.schema().trunks() {
        match node {
            SchemaNode::Branch(children) => {
                for (name, _) in children {
                    aspects.push(format!("{}: {}", humanize(trunk), humanize(name)));
                }
            }
            SchemaNode::Leaf(_) => aspects.push(humanize(trunk)),
        }
    }
    if aspects.is_empty() {
        aspects.push("profile".into());
    }
    (0..k)
        .map(|i| {
            let aspect = &aspects[i % aspects.len()];
            let round = i / aspects.len();
            if round == 0 {
                format!("{q} ({aspect})")
            } else {
                format!("{q} ({aspect}, angle {})", round + 1)
            }
        })
        .collect()
}

const EXPANSION_PROMPT: &str = "Rewrite the question below into {k} alternative search queries. Each rewrite should emphasise a different attribute of the user or an aspect the persona memory may be missing.\n\nPersona memory:\n{outline}\n\nQuestion: {q}\n\nOutput exactly {k} queries, one per line, with no numbering.";

fn strip_list_marker(line: &str) -> &str {
    let t = line.trim();
    let t = t.trim_start_matches(['-', '*', '•']);
    let digits = t.trim_start_matches(|c: char| c.is_ascii_digit());
    let t = if digits.len() < t.len() {
        digits.trim_start_matches(['.', ')', ':'])
    } else {
        t
    };
    t.trim().trim_matches('"')
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpanderKind {
    #[default]
    Template,
    Llm,
}

/// Returns `[q, q̃1..q̃K]`. With a model, short replies are padded from the
/// template; a failed call degrades to `[q]`.
pub fn expand_queries(
    q: &str,
    tree: &PersonaTree,
    k: usize,
    kind: ExpanderKind,
    client: Option<&dyn ChatClient>,
) -> Expansion {
    let k = k.max(1);
    let rewrites = match (kind, client) {
        (ExpanderKind::Template, _) => template_expansions(q, tree, k),
        (ExpanderKind::Llm, None) => {
            log::warn!("query expansion requested without a client");
            return Expansion {
                queries: vec![q.to_string()],
                degraded: true,
            };
        }
        (ExpanderKind::Llm, Some(c)) => {
            let prompt = EXPANSION_PROMPT
                .replace("{k}", &k.to_string())
                .replacen("{outline}", tree.to_prompt_compact().trim_end(), 1)
                .replacen("{q}", q, 1);
            match c.complete(&ChatRequest::new(prompt)) {
                Ok(reply) => {
                    let mut seen: HashSet<String> = HashSet::from([q.to_string()]);
                    let mut out: Vec<String> = reply
                        .lines()
                        .map(strip_list_marker)
                        .filter(|l| !l.is_empty())
                        .map(str::to_string)
                        .filter(|l| seen.insert(l.clone()))
                        .take(k)
                        .collect();
                    for extra in template_expansions(q, tree, k) {
                        if out.len() >= k {
                            break;
                        }
                        if seen.insert(extra.clone()) {
                            out.push(extra);
                        }
                    }
                    out
                }
                Err(e) => {
                    log::warn!("query expansion failed, using the original query only: {e}");
                    return Expansion {
                        queries: vec![q.to_string()],
                        degraded: true,
                    };
                }
            }
        }
    };
    let mut queries = Vec::with_capacity(k + 1);
    queries.push(q.to_string());
    queries.extend(rewrites);
    Expansion {
        queries,
        degraded: false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolHit {
    pub chunk_id: u64,
    pub text: String,
    pub score: f64,
    /// Index into the (deduplicated) query list.
    pub query_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Sequential,
    #[default]
    Concurrent,
}

/// Per-query top-`k`, tagged with the query index. Duplicate queries are
/// searched once; the pool is laid out by query order, then rank, whatever
/// the schedule.
pub fn retrieve_parallel(
    retriever: &dyn Retriever,
    queries: &[String],
    k: usize,
    schedule: Schedule,
) -> Vec<PoolHit> {
    let mut seen = HashSet::new();
    let unique: Vec<&str> = queries
        .iter()
        .map(String::as_str)
        .filter(|q| seen.insert(*q))
        .collect();
    let per_query: Vec<Vec<Hit>> = match schedule {
        Schedule::Sequential => unique.iter().map(|q| retriever.search(q, k)).collect(),
        Schedule::Concurrent => thread::scope(|s| {
            let handles: Vec<_> = unique
                .iter()
                .map(|q| s.spawn(move || retriever.search(q, k)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("retrieval thread panicked"))
                .collect()
        }),
    };
    per_query
        .into_iter()
        .enumerate()
        .flat_map(|(query_index, hits)| {
            hits.into_iter().map(move |h| PoolHit {
                chunk_id: h.chunk_id,
                text: h.text,
                score: h.score,
                query_index,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snippet {
    pub chunk_id: u64,
    pub text: String,
    /// Reranker score against the original query.
    pub score: f64,
    /// Best retrieval score across queries.
    pub retrieval_score: f64,
    pub query_index: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FusedContext {
    pub snippets: Vec<Snippet>,
    /// Sum of snippet text lengths in chars; never above the fusion budget.
    pub total_chars: usize,
}

impl FusedContext {
    pub fn is_empty(&self) -> bool {
        self.snippets.is_empty()
    }

    /// The block appended to the fast context in agentic mode.
    pub fn render(&self) -> String {
        let mut out = String::from(FUSED_HEADER);
        for s in &self.snippets {
            out.push_str(&format!("\n[chunk {}]\n{}", s.chunk_id, s.text));
        }
        out
    }
}

/// Dedups by chunk (max retrieval score kept), rescores against `q`, sorts
/// by (−score, chunk_id), then cuts to `limit` snippets and `budget` chars.
/// The snippet that crosses the budget is truncated to fit.
pub fn rerank_fuse(
    q: &str,
    pool: &[PoolHit],
    reranker: &dyn Reranker,
    limit: usize,
    budget: usize,
) -> FusedContext {
    let mut best: BTreeMap<u64, &PoolHit> = BTreeMap::new();
    for hit in pool {
        best.entry(hit.chunk_id)
            .and_modify(|cur| {
                let better = hit.score > cur.score
                    || (hit.score == cur.score && hit.query_index < cur.query_index);
                if better {
                    *cur = hit;
                }
            })
            .or_insert(hit);
    }
    let mut snippets: Vec<Snippet> = best
        .into_values()
        .map(|h| Snippet {
            chunk_id: h.chunk_id,
            text: h.text.clone(),
            score: reranker.score(q, &h.text),
            retrieval_score: h.score,
            query_index: h.query_index,
        })
        .collect();
    snippets.sort_by(|a, b| by_score_then_id(a.score, a.chunk_id, b.score, b.chunk_id));
    snippets.truncate(limit);

    let mut fused = FusedContext::default();
    for mut s in snippets {
        let remaining = budget - fused.total_chars;
        if remaining == 0 {
            break;
        }
        let len = s.text.chars().count();
        if len > remaining {
            s.text = s.text.chars().take(remaining).collect();
            fused.total_chars += remaining;
            fused.snippets.push(s);
            break;
        }
        fused.total_chars += len;
        fused.snippets.push(s);
    }
    fused
}

const ANSWER_PREAMBLE: &str = "You are a personalized assistant. The outline below is your long-term memory of the user. Answer the query using it.\n\n=== Memory ===\n";
const ANSWER_CHOICE_INSTRUCTION: &str =
    "Respond with only the letter of the correct option (A, B, C or D).";

pub const OPTION_LETTERS: [char; 4] = ['A', 'B', 'C', 'D'];

/// `(A) text` lines, one per option.
pub fn render_options(options: &[String]) -> String {
    options
        .iter()
        .zip(OPTION_LETTERS)
        .map(|(text, letter)| format!("({letter}) {text}"))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Full answer prompt. Agentic context is the fast context followed by the
/// fused block; eval mode appends the options and a letter-only instruction.
pub fn build_answer_prompt(
    q: &str,
    tree: &PersonaTree,
    fused: Option<&FusedContext>,
    options: Option<&[String]>,
) -> String {
    let mut prompt = String::from(ANSWER_PREAMBLE);
    prompt.push_str(&answer_context(q, tree, fused));
    if let Some(options) = options {
        prompt.push_str("\n\n=== Options ===\n");
        prompt.push_str(&render_options(options));
        prompt.push_str("\n\n");
        prompt.push_str(ANSWER_CHOICE_INSTRUCTION);
    }
    prompt
}

pub fn answer_context(q: &str, tree: &PersonaTree, fused: Option<&FusedContext>) -> String {
    let mut context = fast_context(tree, q);
    if let Some(f) = fused {
        context.push_str(&f.render());
    }
    context
}

pub fn answer(
    client: &dyn ChatClient,
    q: &str,
    tree: &PersonaTree,
    fused: Option<&FusedContext>,
    options: Option<&[String]>,
) -> Result<String, ClientError> {
    client.complete(&ChatRequest::new(build_answer_prompt(
        q, tree, fused, options,
    )))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecallMode {
    #[default]
    Auto,
    Fast,
    Agentic,
}

impl std::str::FromStr for RecallMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "auto" => Ok(RecallMode::Auto),
            "fast" => Ok(RecallMode::Fast),
            "agentic" => Ok(RecallMode::Agentic),
            other => Err(format!(
                "unknown mode {other:?} (expected auto, fast or agentic)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallConfig {
    pub mode: RecallMode,
    pub router: RouterConfig,
    pub expander: ExpanderKind,
    /// Number of rewrites K.
    pub expansions: usize,
    /// Per-query retrieval count k.
    pub top_k: usize,
    pub fuse_limit: usize,
    pub fusion_budget: usize,
    pub schedule: Schedule,
}

impl Default for RecallConfig {
    fn default() -> Self {
        Self {
            mode: RecallMode::Auto,
            router: RouterConfig::default(),
            expander: ExpanderKind::Template,
            expansions: DEFAULT_EXPANSIONS,
            top_k: DEFAULT_TOP_K,
            fuse_limit: DEFAULT_FUSE_LIMIT,
            fusion_budget: DEFAULT_FUSION_BUDGET,
            schedule: Schedule::Concurrent,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallOutcome {
    pub route: RouteDecision,
    pub queries: Vec<String>,
    pub degraded: bool,
    pub fused: Option<FusedContext>,
    /// Context handed to the answer model (without preamble and options).
    pub context: String,
    pub answer: String,
}

/// Wires the recall stages together for one query.
pub struct Recall<'a> {
    pub retriever: &'a dyn Retriever,
    pub reranker: &'a dyn Reranker,
    pub answerer: &'a dyn ChatClient,
    /// Client for the LLM router and expander, when enabled.
    pub helper: Option<&'a dyn ChatClient>,
    pub config: &'a RecallConfig,
}

impl Recall<'_> {
    pub fn decide(&self, q: &str, tree: &PersonaTree) -> RouteDecision {
        match self.config.mode {
            RecallMode::Fast => RouteDecision {
                mode: AnswerMode::Fast,
                reason: "forced".into(),
            },
            RecallMode::Agentic => RouteDecision {
                mode: AnswerMode::Agentic,
                reason: "forced".into(),
            },
            RecallMode::Auto => route(q, tree, &self.config.router, self.helper),
        }
    }

    /// Everything up to (not including) the answer call.
    pub fn gather(
        &self,
        q: &str,
        tree: &PersonaTree,
    ) -> (RouteDecision, Expansion, Option<FusedContext>) {
        let route = self.decide(q, tree);
        if route.mode == AnswerMode::Fast {
            let expansion = Expansion {
                queries: vec![q.to_string()],
                degraded: false,
            };
            return (route, expansion, None);
        }
        let cfg = self.config;
        let expansion = expand_queries(q, tree, cfg.expansions, cfg.expander, self.helper);
        let pool = retrieve_parallel(self.retriever, &expansion.queries, cfg.top_k, cfg.schedule);
        let fused = rerank_fuse(q, &pool, self.reranker, cfg.fuse_limit, cfg.fusion_budget);
        (route, expansion, Some(fused))
    }

    pub fn respond(
        &self,
        q: &str,
        tree: &PersonaTree,
        options: Option<&[String]>,
    ) -> Result<RecallOutcome, ClientError> {
        let (route, expansion, fused) = self.gather(q, tree);
        let answer = answer(self.answerer, q, tree, fused.as_ref(), options)?;
        Ok(RecallOutcome {
            context: answer_context(q, tree, fused.as_ref()),
            route,
            queries: expansion.queries,
            degraded: expansion.degraded,
            fused,
            answer,
        })
    }
}
