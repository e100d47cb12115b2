//! End-to-end tests of the `memtree` binary against the shared fixtures.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use serde_json::Value;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures")
        .join(name)
}

/// The binary with a clean MEMTREE_* environment and the store under `dir`.
fn memtree(dir: &Path) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_memtree"));
    for (key, _) in std::env::vars() {
        if key.starts_with("MEMTREE_") {
            cmd.env_remove(key);
        }
    }
    cmd.arg("--store").arg(dir.join("store"));
    cmd
}

fn run(cmd: &mut Command) -> Output {
    cmd.output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("utf-8 stdout")
}

fn stderr(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).expect("utf-8 stderr")
}

fn ok(cmd: &mut Command) -> String {
    let out = run(cmd);
    assert!(out.status.success(), "command failed: {}", stderr(&out));
    stdout(&out)
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

/// Store with the fixture history ingested through the scripted listener.
fn ingested() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    ok(memtree(dir.path()).arg("init"));
    ok(memtree(dir.path())
        .arg("ingest")
        .arg(fixture("history.jsonl"))
        .arg("--mock-listener")
        .arg(fixture("listener_script.json")));
    dir
}

fn write_script(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("script.json");
    fs::write(&path, body).unwrap();
    path
}

#[test]
fn init_then_show_prints_the_empty_outline() {
    let dir = tempfile::tempdir().unwrap();
    let init = ok(memtree(dir.path()).arg("init"));
    assert!(init.starts_with("initialized store at "), "{init}");
    assert!(init.contains("(version 0, 50 leaves, digest "), "{init}");

    let outline = ok(memtree(dir.path()).arg("show"));
    assert!(outline.starts_with("1_Biological_Characteristics\n  Physiological_Status\n"));
    assert!(outline.contains("\n      Chronological_Age:\n"));
    assert!(outline.contains("\n3_Social_Characteristics\n"));
    assert_eq!(outline.lines().filter(|l| l.ends_with(':')).count(), 50);

    let again = run(memtree(dir.path()).arg("init"));
    assert_eq!(code(&again), 4, "re-init must be a store error");
}

#[test]
fn ingest_then_verify_and_show_the_golden_tree() {
    let dir = tempfile::tempdir().unwrap();
    ok(memtree(dir.path()).arg("init"));
    let summary = ok(memtree(dir.path())
        .arg("ingest")
        .arg(fixture("history.jsonl"))
        .arg("--mock-listener")
        .arg(fixture("listener_script.json")));
    assert!(
        summary.contains("chunks: 31 evolved, 0 already committed"),
        "{summary}"
    );
    assert!(summary.contains("truncated=1"), "{summary}");
    assert!(
        summary.trim_end().ends_with("head: version 31"),
        "{summary}"
    );

    let verify = ok(memtree(dir.path()).args(["replay", "--verify"]));
    assert_eq!(verify, "verified 32 versions\n");

    let golden = fs::read_to_string(fixture("golden_tree.txt")).unwrap();
    assert_eq!(ok(memtree(dir.path()).arg("show")), golden);

    let replayed = ok(memtree(dir.path()).args(["replay", "--from", "0", "--to", "31"]));
    assert!(replayed.starts_with("replayed 0..31: digest "));
    assert!(replayed.ends_with(&golden));

    // Re-running the same history commits nothing new.
    let rerun = ok(memtree(dir.path())
        .arg("ingest")
        .arg(fixture("history.jsonl"))
        .arg("--mock-listener")
        .arg(fixture("listener_script.json")));
    assert!(
        rerun.contains("chunks: 0 evolved, 31 already committed"),
        "{rerun}"
    );
}

#[test]
fn append_continues_chunk_numbering() {
    let dir = ingested();
    let script = write_script(dir.path(), r#"{"*": "NO_OP()"}"#);
    let out = ok(memtree(dir.path())
        .arg("ingest")
        .arg(fixture("history.jsonl"))
        .arg("--append")
        .arg("--mock-listener")
        .arg(&script));
    assert!(out.contains("chunks: 31 evolved"), "{out}");
    assert!(out.contains("head: version 62"), "{out}");
}

#[test]
fn ask_fast_mode_reports_the_route_and_context() {
    let dir = ingested();
    let out = ok(memtree(dir.path()).args([
        "ask",
        "Where does Mara live?",
        "--mode",
        "fast",
        "--mock-answer",
        "In Lisbon.",
    ]));
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines.len(), 3, "{out}");
    assert_eq!(lines[0], "In Lisbon.");
    assert_eq!(lines[1], "mode=fast reason=\"forced\"");
    assert!(lines[2].starts_with("context_chars="), "{out}");

    let json: Value = serde_json::from_str(&ok(memtree(dir.path()).args([
        "ask",
        "Which book should I recommend to her next?",
        "--mode",
        "agentic",
        "--mock-answer",
        "B",
        "--json",
    ])))
    .unwrap();
    assert_eq!(json["mode"], "agentic");
    assert_eq!(json["queries"].as_array().unwrap().len(), 4);
    let fused = json["fused_chunks"].as_array().unwrap();
    assert!(!fused.is_empty() && fused.len() <= 4);
}

fn assert_reparses(text: &str) -> Value {
    let value: Value = serde_json::from_str(text).expect("valid JSON");
    let again = serde_json::to_string_pretty(&value).unwrap() + "\n";
    assert_eq!(again, text, "JSON output is not in canonical pretty form");
    value
}

#[test]
fn json_outputs_reparse_to_the_same_document() {
    let dir = ingested();

    let show = assert_reparses(&ok(memtree(dir.path()).args(["show", "--json"])));
    assert_eq!(show["version"], 31);
    assert_eq!(show["leaves"].as_array().unwrap().len(), 50);

    let old = assert_reparses(&ok(memtree(dir.path()).args([
        "show",
        "--version",
        "0",
        "--json",
    ])));
    assert!(old["leaves"]
        .as_array()
        .unwrap()
        .iter()
        .all(|l| l["value"] == ""));

    let diff = assert_reparses(&ok(memtree(dir.path()).args(["diff", "0", "31", "--json"])));
    let changes = diff.as_array().unwrap();
    let populated = show["leaves"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|l| l["value"] != "")
        .count();
    assert_eq!(changes.len(), populated);

    let golden: Value =
        serde_json::from_str(&fs::read_to_string(fixture("golden_diffs.json")).unwrap()).unwrap();
    let step = assert_reparses(&ok(memtree(dir.path()).args(["diff", "1", "2", "--json"])));
    assert_eq!(step, golden[1]["changes"]);

    let eval = assert_reparses(&ok(memtree(dir.path())
        .args(["eval", "--mock-answer", "A", "--json"])
        .arg(fixture("cases.jsonl"))));
    let golden_eval: Value =
        serde_json::from_str(&fs::read_to_string(fixture("golden_eval.json")).unwrap()).unwrap();
    assert_eq!(eval, golden_eval);
}

#[test]
fn diff_text_is_tab_separated() {
    let dir = ingested();
    let out = ok(memtree(dir.path()).args(["diff", "0", "1"]));
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("PATH\tBEFORE\tAFTER"));
    let row: Vec<&str> = lines.next().unwrap().split('\t').collect();
    assert_eq!(row.len(), 3);
    assert_eq!(row[1], "\"\"");
}

#[test]
fn eval_table_csv_and_oracle() {
    let dir = ingested();
    let csv = dir.path().join("cases.csv");
    let table = ok(memtree(dir.path())
        .arg("eval")
        .arg(fixture("cases.jsonl"))
        .arg("--mock-oracle")
        .arg("--csv")
        .arg(&csv));
    let overall = table
        .lines()
        .find(|l| l.starts_with("Overall"))
        .expect("overall row");
    assert!(
        overall.contains("20") && overall.contains("1.0000"),
        "{table}"
    );
    let rows = fs::read_to_string(&csv).unwrap();
    assert_eq!(rows.lines().count(), 21);
    assert!(rows.lines().skip(1).all(|r| r.contains(",true,")), "{rows}");
}

#[test]
fn eval_can_ingest_first() {
    let dir = tempfile::tempdir().unwrap();
    ok(memtree(dir.path()).arg("init"));
    let out = ok(memtree(dir.path())
        .arg("eval")
        .arg(fixture("cases.jsonl"))
        .args(["--mock-answer", "A", "--mode", "fast", "--ingest"])
        .arg(fixture("history.jsonl"))
        .arg("--mock-listener")
        .arg(fixture("listener_script.json")));
    assert!(out.contains("head: version 31"), "{out}");
    let overall = out.lines().find(|l| l.starts_with("Overall")).unwrap();
    assert!(overall.contains("0.2500"), "{out}");
}

#[test]
fn chat_folds_dialogue_into_memory() {
    let dir = tempfile::tempdir().unwrap();
    ok(memtree(dir.path()).arg("init"));
    let script = write_script(
        dir.path(),
        r#"{"*": "UPDATE(3_Social_Characteristics.Demographics.Location, \"Porto\")"}"#,
    );
    let mut child = memtree(dir.path())
        .arg("chat")
        .arg("--mock-listener")
        .arg(&script)
        .args(["--mock-answer", "Noted."])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child
        .stdin
        .take()
        .unwrap()
        .write_all(b"hello\nI just moved to Porto\n:flush\n:quit\n")
        .unwrap();
    let out = child.wait_with_output().unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stdout(&out).matches("assistant> Noted.").count(), 2);
    assert!(
        stderr(&out).contains("[memory at version 2]"),
        "{}",
        stderr(&out)
    );
    let shown = ok(memtree(dir.path()).arg("show"));
    assert!(shown.contains("    Location: Porto\n"), "{shown}");
}

#[test]
fn config_file_env_and_flags_layer() {
    let dir = tempfile::tempdir().unwrap();
    let script = write_script(dir.path(), r#"{"*": "NO_OP()"}"#);
    let config = dir.path().join("memtree.toml");
    fs::write(&config, "chunk_w = 5\n\n[recall]\ntop_k = 2\n").unwrap();

    let ingest = |extra: &[&str], env: Option<(&str, &str)>| {
        let sub = tempfile::tempdir().unwrap();
        let mut cmd = memtree(sub.path());
        cmd.arg("--config").arg(&config).args(extra);
        if let Some((k, v)) = env {
            cmd.env(k, v);
        }
        ok(memtree(sub.path()).arg("init"));
        ok(cmd
            .arg("ingest")
            .arg(fixture("history.jsonl"))
            .arg("--mock-listener")
            .arg(&script))
    };
    // 92 turns: file w=5 -> 19 chunks, env w=7 -> 14, flag w=10 -> 10.
    assert!(ingest(&[], None).contains("chunks: 19 evolved"));
    assert!(ingest(&[], Some(("MEMTREE_CHUNK_W", "7"))).contains("chunks: 14 evolved"));
    assert!(
        ingest(&["--set", "chunk_w=10"], Some(("MEMTREE_CHUNK_W", "7")))
            .contains("chunks: 10 evolved")
    );
}

#[test]
fn exit_codes_follow_the_error_class() {
    let dir = tempfile::tempdir().unwrap();

    let usage = run(memtree(dir.path()).arg("frobnicate"));
    assert_eq!(code(&usage), 2);
    assert!(stderr(&usage).starts_with("error[usage]: "));
    assert_eq!(stderr(&usage).lines().count(), 1);

    let missing = run(memtree(dir.path()).arg("show"));
    assert_eq!(code(&missing), 4);
    assert!(stderr(&missing).starts_with("error[store]: "));

    let bad_key = run(memtree(dir.path()).args(["--set", "recall.nope=1", "show"]));
    assert_eq!(code(&bad_key), 3);
    assert!(stderr(&bad_key).starts_with("error[config]: "));

    let bad_window = run(memtree(dir.path()).args(["--set", "chunk_w=0", "show"]));
    assert_eq!(code(&bad_window), 3);

    ok(memtree(dir.path()).arg("init"));
    let no_model = run(memtree(dir.path()).args(["ask", "hi"]));
    assert_eq!(code(&no_model), 3, "{}", stderr(&no_model));

    let unreachable = run(memtree(dir.path()).args([
        "--set",
        "listener.endpoint=http://127.0.0.1:9",
        "--set",
        "listener.timeout_secs=2",
        "ask",
        "hi",
        "--mode",
        "fast",
    ]));
    assert_eq!(code(&unreachable), 5, "{}", stderr(&unreachable));
    assert!(stderr(&unreachable).starts_with("error[transport]: "));

    let bad_history = dir.path().join("bad.jsonl");
    fs::write(&bad_history, "{\"role\": \"robot\", \"text\": \"beep\"}\n").unwrap();
    let malformed = run(memtree(dir.path())
        .arg("ingest")
        .arg(&bad_history)
        .args(["--mock-listener"])
        .arg(write_script(dir.path(), r#"{"*": "NO_OP()"}"#)));
    assert_eq!(code(&malformed), 2, "{}", stderr(&malformed));
}

#[test]
fn tampered_log_fails_verification_with_exit_6() {
    let dir = ingested();
    let log = dir.path().join("store/versions.jsonl");
    let text = fs::read_to_string(&log).unwrap();
    assert!(text.contains("Mara Lindqvist"));
    // Same length, so only the op content changes.
    let first = text.find("Mara Lindqvist").unwrap();
    let mut tampered = text.clone();
    tampered.replace_range(first..first + "Mara Lindqvist".len(), "Mark Lindqvist");
    fs::write(&log, tampered).unwrap();

    let out = run(memtree(dir.path()).args(["replay", "--verify"]));
    assert_eq!(code(&out), 6, "{}", stderr(&out));
    assert!(stderr(&out).starts_with("error[verification]: "));
}
