use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::json;

use memtree_core::client::{ChatClient, HttpChatClient, MockChatClient};
use memtree_core::config::{load_config, parse_flag, EngineConfig};
use memtree_core::eval::{load_cases, run_eval, OracleClient};
use memtree_core::gate::DeletionMode;
use memtree_core::ingest::{
    chunk_from, evolve, normalize_history, DialogueTurn, EvolveOutcome, RetryPolicy, Role,
    TurnBuffer,
};
use memtree_core::listener::{estimate_tokens, ChatListener, OpsListener, ScriptedListener};
use memtree_core::recall::{
    Bm25Retriever, ExpanderKind, Recall, RecallConfig, RecallMode, RouterKind,
};
use memtree_core::store::{diff, VersionStore};
use memtree_core::{PersonaTree, Schema};

use crate::error::{Class, CliError};
use crate::{Cli, Command, MockArgs};

fn usage(message: impl Into<String>) -> CliError {
    CliError::new(Class::Usage, message)
}

fn read_input(path: &Path, what: &str) -> Result<String, CliError> {
    fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read {what} {}: {e}", path.display())))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let mut flags = cli
        .set
        .iter()
        .map(|s| parse_flag(s))
        .collect::<Result<Vec<_>, _>>()?;
    if let Some(store) = &cli.store {
        flags.push(("store_path".into(), store.display().to_string()));
    }
    let config_path = cli
        .config
        .clone()
        .or_else(|| std::env::var_os("MEMTREE_CONFIG").map(PathBuf::from));
    let cfg = load_config(config_path.as_deref(), &flags)?;

    match cli.command {
        Command::Init { schema } => init(&cfg, schema.as_deref()),
        Command::Ingest {
            history,
            append,
            mock_listener,
            json,
        } => {
            let mut store = VersionStore::open(&cfg.store_path)?;
            let listener = listener(&cfg, mock_listener.as_deref())?;
            let outcome = ingest(&mut store, &cfg, &history, append, listener.as_ref())?;
            print_outcome(&outcome, json);
            Ok(())
        }
        Command::Show { version, json } => show(&cfg, version, json),
        Command::Diff { a, b, json } => diff_cmd(&cfg, a, b, json),
        Command::Ask {
            question,
            mode,
            mock_answer,
            json,
        } => ask(&cfg, &question, mode.as_deref(), mock_answer, json),
        Command::Chat { mocks } => chat(&cfg, &mocks),
        Command::Eval {
            cases,
            mode,
            mock_oracle,
            mock_answer,
            ingest: history,
            mock_listener,
            csv,
            json,
        } => {
            if let Some(history) = history {
                let mut store = VersionStore::open(&cfg.store_path)?;
                let listener = listener(&cfg, mock_listener.as_deref())?;
                let outcome = ingest(&mut store, &cfg, &history, false, listener.as_ref())?;
                if !json {
                    print_outcome(&outcome, false);
                }
            }
            eval(
                &cfg,
                &cases,
                mode.as_deref(),
                mock_oracle,
                mock_answer,
                csv.as_deref(),
                json,
            )
        }
        Command::Replay { verify, from, to } => replay(&cfg, verify, from, to),
    }
}

fn init(cfg: &EngineConfig, schema_flag: Option<&Path>) -> Result<(), CliError> {
    let schema = match schema_flag.or(cfg.schema_path.as_deref()) {
        Some(path) => {
            Schema::from_json_with_max_depth(&read_input(path, "schema")?, cfg.gate.max_depth)?
        }
        None => Schema::default_schema(),
    };
    let mut gate = cfg.gate.clone();
    if let DeletionMode::Marker(m) = &mut gate.deletion_mode {
        *m = cfg.deletion_marker.clone();
    }
    gate.validate(&schema)
        .map_err(|e| CliError::new(Class::Config, format!("gate: {e}")))?;
    let store = VersionStore::create(&cfg.store_path, Arc::new(schema), gate)?;
    println!(
        "initialized store at {} (version 0, {} leaves, digest {})",
        cfg.store_path.display(),
        store.schema().leaf_count(),
        store.head_record().digest
    );
    Ok(())
}

fn http_client(cfg: &EngineConfig) -> Option<HttpChatClient> {
    cfg.listener.endpoint.as_deref().map(|endpoint| {
        HttpChatClient::new(
            endpoint,
            cfg.listener.api_key.clone(),
            &cfg.listener.model,
            cfg.listener.timeout(),
        )
    })
}

fn not_configured(what: &str, flag: &str) -> CliError {
    CliError::new(
        Class::Config,
        format!("no model endpoint for the {what}: set listener.endpoint (or MEMTREE_LLM_ENDPOINT), or pass {flag}"),
    )
}

fn listener(cfg: &EngineConfig, script: Option<&Path>) -> Result<Box<dyn OpsListener>, CliError> {
    if let Some(path) = script {
        let scripted = ScriptedListener::from_json(&read_input(path, "listener script")?)
            .map_err(|e| usage(format!("listener script {}: {e}", path.display())))?;
        return Ok(Box::new(scripted));
    }
    let client = http_client(cfg).ok_or_else(|| not_configured("listener", "--mock-listener"))?;
    Ok(Box::new(ChatListener::new(client, cfg.listener.clone())))
}

fn answerer(
    cfg: &EngineConfig,
    mock_answer: Option<String>,
) -> Result<Box<dyn ChatClient>, CliError> {
    if let Some(text) = mock_answer {
        return Ok(Box::new(MockChatClient::fixed(text)));
    }
    let client = http_client(cfg).ok_or_else(|| not_configured("answer model", "--mock-answer"))?;
    Ok(Box::new(client))
}

/// Client for the model-backed router/expander, only when one is enabled and
/// the answers are not mocked.
fn helper(cfg: &EngineConfig, mocked: bool) -> Option<Box<dyn ChatClient>> {
    let wanted =
        cfg.recall.router.kind == RouterKind::Llm || cfg.recall.expander == ExpanderKind::Llm;
    if mocked || !wanted {
        return None;
    }
    http_client(cfg).map(|c| Box::new(c) as Box<dyn ChatClient>)
}

fn recall_config(cfg: &EngineConfig, mode: Option<&str>) -> Result<RecallConfig, CliError> {
    let mut rc = cfg.recall.clone();
    if let Some(m) = mode {
        rc.mode = m.parse::<RecallMode>().map_err(usage)?;
    }
    Ok(rc)
}

fn ingest(
    store: &mut VersionStore,
    cfg: &EngineConfig,
    history: &Path,
    append: bool,
    listener: &dyn OpsListener,
) -> Result<EvolveOutcome, CliError> {
    let turns = normalize_history(&read_input(history, "history")?)?;
    let first = if append { next_chunk_id(store)? } else { 1 };
    let chunks = chunk_from(&turns, cfg.chunk_w, first);
    store.archive_chunks(&chunks)?;
    let retry = RetryPolicy {
        max_retries: cfg.max_retries,
        ..RetryPolicy::default()
    };
    Ok(evolve(store, listener, &chunks, retry)?)
}

fn next_chunk_id(store: &VersionStore) -> Result<u64, CliError> {
    let archived = store.archived_chunks()?.last().map(|c| c.chunk_id);
    Ok(archived.max(store.last_chunk_id()).map_or(1, |id| id + 1))
}

fn print_outcome(outcome: &EvolveOutcome, as_json: bool) {
    if as_json {
        println!(
            "{}",
            serde_json::to_string_pretty(outcome).expect("outcome serializes")
        );
        return;
    }
    let sum = |f: fn(&memtree_core::ingest::EvolveStep) -> usize| {
        outcome.steps.iter().map(f).sum::<usize>()
    };
    println!(
        "chunks: {} evolved, {} already committed",
        outcome.steps.len(),
        outcome.skipped_chunks
    );
    println!(
        "ops: applied={} rejected={} truncated={} skipped_lines={}",
        sum(|s| s.applied),
        sum(|s| s.rejected),
        sum(|s| s.truncated),
        sum(|s| s.skipped_lines)
    );
    println!("head: version {}", outcome.head);
}

fn tree_at(store: &VersionStore, version: Option<u64>) -> Result<(u64, PersonaTree), CliError> {
    let v = version.unwrap_or_else(|| store.head_id());
    Ok((v, store.tree_at(v)?))
}

fn show(cfg: &EngineConfig, version: Option<u64>, as_json: bool) -> Result<(), CliError> {
    let store = VersionStore::open_read_only(&cfg.store_path)?;
    let (v, tree) = tree_at(&store, version)?;
    if as_json {
        let leaves: Vec<_> = tree
            .leaves()
            .into_iter()
            .map(|l| {
                json!({
                    "path": l.path.to_string(),
                    "value": l.value,
                    "budget": l.budget,
                    "declared": l.declared,
                })
            })
            .collect();
        let doc = json!({"version": v, "digest": tree.digest(), "leaves": leaves});
        println!("{}", serde_json::to_string_pretty(&doc).expect("json"));
    } else {
        print!("{}", tree.to_prompt_compact());
    }
    Ok(())
}

fn quote(v: &Option<String>) -> String {
    match v {
        Some(s) => serde_json::to_string(s).expect("string serializes"),
        None => "-".into(),
    }
}

fn diff_cmd(cfg: &EngineConfig, a: u64, b: u64, as_json: bool) -> Result<(), CliError> {
    let store = VersionStore::open_read_only(&cfg.store_path)?;
    let changes = diff(&store.tree_at(a)?, &store.tree_at(b)?);
    if as_json {
        println!("{}", serde_json::to_string_pretty(&changes).expect("json"));
        return Ok(());
    }
    // Values are JSON-quoted so tabs and quotes survive; absent sides are `-`.
    println!("PATH\tBEFORE\tAFTER");
    for c in &changes {
        println!("{}\t{}\t{}", c.path, quote(&c.before), quote(&c.after));
    }
    Ok(())
}

fn ask(
    cfg: &EngineConfig,
    question: &str,
    mode: Option<&str>,
    mock_answer: Option<String>,
    as_json: bool,
) -> Result<(), CliError> {
    let store = VersionStore::open_read_only(&cfg.store_path)?;
    let tree = store.head_tree()?;
    let retriever = Bm25Retriever::from_chunks(&store.archived_chunks()?);
    let config = recall_config(cfg, mode)?;
    let mocked = mock_answer.is_some();
    let answerer = answerer(cfg, mock_answer)?;
    let helper = helper(cfg, mocked);
    let recall = Recall {
        retriever: &retriever,
        reranker: &retriever,
        answerer: answerer.as_ref(),
        helper: helper.as_deref(),
        config: &config,
    };
    let out = recall.respond(question, &tree, None)?;
    let chars = out.context.chars().count();
    let tokens = estimate_tokens(&out.context);
    if as_json {
        let doc = json!({
            "answer": out.answer,
            "mode": out.route.mode,
            "reason": out.route.reason,
            "queries": out.queries,
            "degraded": out.degraded,
            "fused_chunks": out.fused.as_ref().map(|f| f.snippets.iter().map(|s| s.chunk_id).collect::<Vec<_>>()),
            "context_chars": chars,
            "context_tokens": tokens,
        });
        println!("{}", serde_json::to_string_pretty(&doc).expect("json"));
    } else {
        println!("{}", out.answer);
        println!("mode={} reason={:?}", out.route.mode, out.route.reason);
        println!("context_chars={chars} context_tokens={tokens}");
    }
    Ok(())
}

fn flush_chat(
    store: &mut VersionStore,
    cfg: &EngineConfig,
    listener: &dyn OpsListener,
    turns: Vec<DialogueTurn>,
) -> Result<u64, CliError> {
    let chunks = chunk_from(&turns, cfg.chunk_w, next_chunk_id(store)?);
    store.archive_chunks(&chunks)?;
    let retry = RetryPolicy {
        max_retries: cfg.max_retries,
        ..RetryPolicy::default()
    };
    Ok(evolve(store, listener, &chunks, retry)?.head)
}

fn chat(cfg: &EngineConfig, mocks: &MockArgs) -> Result<(), CliError> {
    let mut store = VersionStore::open(&cfg.store_path)?;
    let listener = listener(cfg, mocks.mock_listener.as_deref())?;
    let mocked = mocks.mock_answer.is_some();
    let answerer = answerer(cfg, mocks.mock_answer.clone())?;
    let helper = helper(cfg, mocked);
    let config = cfg.recall.clone();
    // Flush after w user/assistant pairs.
    let mut buffer = TurnBuffer::new(2 * cfg.chunk_w);
    let stdin = io::stdin();
    let mut stdout = io::stdout();
    eprintln!("memtree chat: type a message; :flush to update memory now, :show for the tree, :quit to exit");
    loop {
        print!("you> ");
        let _ = stdout.flush();
        let mut line = String::new();
        if stdin
            .lock()
            .read_line(&mut line)
            .map_err(|e| usage(e.to_string()))?
            == 0
        {
            break;
        }
        let line = line.trim();
        match line {
            "" => continue,
            ":quit" | ":q" => break,
            ":show" => {
                print!("{}", store.head_tree()?.to_prompt_compact());
                continue;
            }
            ":flush" => {
                match buffer.flush() {
                    Some(turns) => {
                        let head = flush_chat(&mut store, cfg, listener.as_ref(), turns)?;
                        eprintln!("[memory at version {head}]");
                    }
                    None => eprintln!("[nothing to flush]"),
                }
                continue;
            }
            _ => {}
        }
        let tree = store.head_tree()?;
        let retriever = Bm25Retriever::from_chunks(&store.archived_chunks()?);
        let recall = Recall {
            retriever: &retriever,
            reranker: &retriever,
            answerer: answerer.as_ref(),
            helper: helper.as_deref(),
            config: &config,
        };
        let out = match recall.respond(line, &tree, None) {
            Ok(out) => out,
            Err(e) => {
                eprintln!("{}", CliError::from(e));
                continue;
            }
        };
        println!("assistant> {}", out.answer);
        eprintln!("[mode={} {}]", out.route.mode, out.route.reason);
        buffer.push(DialogueTurn::new(Role::User, line));
        if let Some(turns) = buffer.push(DialogueTurn::new(Role::Assistant, out.answer)) {
            let head = flush_chat(&mut store, cfg, listener.as_ref(), turns)?;
            eprintln!("[memory at version {head}]");
        }
    }
    if let Some(turns) = buffer.flush() {
        let head = flush_chat(&mut store, cfg, listener.as_ref(), turns)?;
        eprintln!("[memory at version {head}]");
    }
    Ok(())
}

fn eval(
    cfg: &EngineConfig,
    cases_path: &Path,
    mode: Option<&str>,
    mock_oracle: bool,
    mock_answer: Option<String>,
    csv: Option<&Path>,
    as_json: bool,
) -> Result<(), CliError> {
    let cases = load_cases(&read_input(cases_path, "cases")?)?;
    let store = VersionStore::open_read_only(&cfg.store_path)?;
    let tree = store.head_tree()?;
    let retriever = Bm25Retriever::from_chunks(&store.archived_chunks()?);
    let config = recall_config(cfg, mode)?;
    let mocked = mock_oracle || mock_answer.is_some();
    let answerer: Box<dyn ChatClient> = if mock_oracle {
        Box::new(OracleClient::new(&cases))
    } else {
        answerer(cfg, mock_answer)?
    };
    let helper = helper(cfg, mocked);
    let recall = Recall {
        retriever: &retriever,
        reranker: &retriever,
        answerer: answerer.as_ref(),
        helper: helper.as_deref(),
        config: &config,
    };
    let report = run_eval(&cases, &recall, &tree);
    if let Some(path) = csv {
        fs::write(path, report.to_csv())
            .map_err(|e| usage(format!("cannot write {}: {e}", path.display())))?;
    }
    if as_json {
        println!("{}", serde_json::to_string_pretty(&report).expect("json"));
    } else {
        print!("{}", report.render_table());
    }
    Ok(())
}

fn replay(cfg: &EngineConfig, verify: bool, from: u64, to: Option<u64>) -> Result<(), CliError> {
    let store = VersionStore::open_read_only(&cfg.store_path)?;
    if verify {
        let n = store.verify()?;
        println!("verified {n} versions");
        return Ok(());
    }
    let to = to.unwrap_or_else(|| store.head_id());
    let tree = store.replay(from, to)?;
    println!("replayed {from}..{to}: digest {}", tree.digest());
    print!("{}", tree.to_prompt_compact());
    Ok(())
}
