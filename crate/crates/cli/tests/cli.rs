use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use lexki::metrics::EvalReport;
use lexki::synthetic::{dialog_fixture, DialogFixtureConfig};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_lexki"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[track_caller]
fn ok(o: Output) -> Output {
    assert!(o.status.success(), "exit {:?}\nstdout:\n{}\nstderr:\n{}", o.status, stdout(&o), stderr(&o));
    o
}

fn data() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data")
}

// The fixture the smoke test runs on: 12 entities, a few hundred pairs.
fn shipped_config() -> DialogFixtureConfig {
    DialogFixtureConfig {
        entities: 12,
        train_pairs: 240,
        valid_pairs: 40,
        test_pairs: 40,
        ..DialogFixtureConfig::default()
    }
}

#[test]
fn shipped_fixture_matches_the_generator() {
    let dir = data().join("fixture");
    let f = dialog_fixture(&shipped_config(), 0).unwrap();
    if std::env::var_os("LEXKI_BLESS").is_some() {
        f.write_to(&dir).unwrap();
    }
    let tmp = tempfile::tempdir().unwrap();
    f.write_to(tmp.path()).unwrap();
    for name in ["articles.jsonl", "train.jsonl", "valid.jsonl", "test.jsonl"] {
        let shipped = std::fs::read_to_string(dir.join(name)).unwrap();
        let fresh = std::fs::read_to_string(tmp.path().join(name)).unwrap();
        assert_eq!(shipped, fresh, "{name} drifted from the generator; rerun with LEXKI_BLESS=1");
    }
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let o = run(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.contains("Usage"), "{e}");
    for sub in ["build-kb", "train-retriever", "mine", "train", "generate", "evaluate", "analyze", "chat"] {
        assert!(e.contains(sub), "usage text lacks {sub}");
    }
}

#[test]
fn unknown_flag_lists_the_valid_ones() {
    let o = run(&["mine", "--no-stoppwords"]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.contains("--no-stopword-masking") && e.contains("--no-exact-matching"), "{e}");
    assert_eq!(run(&[]).status.code(), Some(2));
    assert_eq!(run(&["train", "--lambda", "heavy"]).status.code(), Some(2));
    assert_eq!(ok(run(&["--help"])).status.code(), Some(0));
}

#[test]
fn build_kb_writes_one_line_per_article_and_a_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a.jsonl");
    std::fs::write(
        &a,
        "{\"title\": \"Rowling\", \"text\": \"J. K. Rowling is a British author. She wrote books.\"}\n\
         {\"title\": \"Wand\", \"text\": \"A wand is a stick used in magic. It is thin.\"}\n",
    )
    .unwrap();
    let kb = tmp.path().join("kb.jsonl");
    let o = ok(run(&["build-kb", "--articles", a.to_str().unwrap(), "--out", kb.to_str().unwrap(), "--json"]));
    let lines: Vec<String> = std::fs::read_to_string(&kb).unwrap().lines().map(String::from).collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].contains("J. K. Rowling is a British author."));
    assert!(!lines[0].contains("She wrote"));
    let summary: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(summary["items"], 2);

    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("kb.jsonl.manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "build-kb");
    assert_eq!(m["seed"], 0);
    assert_eq!(m["threads"], 1);
    assert_eq!(m["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
    assert_eq!(m["outputs"][0]["bytes"], std::fs::metadata(&kb).unwrap().len());
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn domain_errors_exit_one_with_the_error_name() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run_in(tmp.path(), &["build-kb", "--articles", "missing.jsonl"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[IoError]"), "{}", stderr(&o));

    std::fs::write(tmp.path().join("bad.jsonl"), "{\"title\": \"A\"}\n").unwrap();
    let o = run_in(tmp.path(), &["build-kb", "--articles", "bad.jsonl"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[ParseError]"), "{}", stderr(&o));

    std::fs::write(tmp.path().join("c.toml"), "[model]\nwidth = 3\n").unwrap();
    let o = run_in(tmp.path(), &["--config", "c.toml", "build-kb"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[ConfigError]"), "{}", stderr(&o));
}

fn copy_fixture(dst: &Path) {
    for name in ["articles.jsonl", "train.jsonl", "valid.jsonl", "test.jsonl"] {
        std::fs::copy(data().join("fixture").join(name), dst.join(name)).unwrap();
    }
    std::fs::copy(data().join("smoke.toml"), dst.join("smoke.toml")).unwrap();
}

fn first_step(dir: &Path, ckpt: &str) -> serde_json::Value {
    let text = std::fs::read_to_string(dir.join(format!("{ckpt}.steps.jsonl"))).unwrap();
    serde_json::from_str(text.lines().next().unwrap()).unwrap()
}

fn chat(dir: &Path, input: &str, json: bool) -> Output {
    let mut args = vec!["--config", "smoke.toml", "chat", "--checkpoint", "ki.ckpt"];
    if json {
        args.push("--json");
    }
    let mut child = bin()
        .current_dir(dir)
        .args(&args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(input.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

#[test]
fn pipeline_smoke_on_the_shipped_fixture() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    copy_fixture(d);
    let c = ["--config", "smoke.toml"];
    let with = |rest: &[&str]| -> Vec<String> { c.iter().chain(rest).map(|s| s.to_string()).collect() };
    let call = |rest: &[&str]| {
        let args = with(rest);
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        ok(run_in(d, &refs))
    };

    call(&["build-kb"]);
    call(&["train-retriever"]);
    assert!(d.join("vocab.txt").exists() && d.join("retriever.ckpt.manifest.json").exists());
    let o = call(&["mine", "--json"]);
    let mined: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert!(mined["records"].as_u64().unwrap() > 100);

    // Missing alignments are a domain error, not a crash.
    let o = run_in(d, &with(&["train", "--lambda", "1", "--alignments", "nope.jsonl"]).iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error[MissingAlignments]"), "{}", stderr(&o));

    call(&["train", "--lambda", "0", "--out", "plain.ckpt"]);
    let o = call(&["train", "--lambda", "1", "--out", "ki.ckpt"]);
    assert!(stderr(&o).lines().filter(|l| l.contains("\"epoch\"")).count() >= 2, "one progress line per epoch");
    let (p, k) = (first_step(d, "plain.ckpt"), first_step(d, "ki.ckpt"));
    assert_eq!(p["nll"], k["nll"], "first logged NLL must not depend on lambda");
    assert!(p["ki"].is_null() && k["ki"].is_number());

    call(&["generate", "--checkpoint", "ki.ckpt"]);
    assert_eq!(std::fs::read_to_string(d.join("hypotheses.jsonl")).unwrap().lines().count(), 40);
    let o = call(&["evaluate", "--checkpoint", "ki.ckpt", "--kb", "kb.jsonl", "--json"]);
    let report: EvalReport = serde_json::from_str(&std::fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    report.validate().unwrap();
    assert!(report.ppl.unwrap() >= 1.0 && report.entity_score.is_some() && report.wiki_f1.is_some());
    assert!(report.tokens_per_sec > 0.0);
    let printed: EvalReport = serde_json::from_str(stdout(&o).trim()).unwrap();
    assert_eq!(printed, report);

    call(&["analyze", "strategies", "--out", "ablation"]);
    let s: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("ablation/summary.json")).unwrap()).unwrap();
    assert_eq!(s["settings"].as_array().unwrap().len(), 3);
    for kind in ["random", "sentence_level", "factual_only", "linguistic_only"] {
        call(&["analyze", "variant", "--kind", kind, "--out", &format!("{kind}.jsonl")]);
    }
    let o = run_in(d, &["analyze", "variant", "--kind", "pos", "--out", "x.jsonl"]);
    assert_eq!(o.status.code(), Some(1));
    let title = std::fs::read_to_string(d.join("kb.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(title.lines().next().unwrap()).unwrap();
    let probe = first["title"].as_str().unwrap().to_lowercase();
    call(&["analyze", "geometry", "--checkpoint", "ki.ckpt", "--probes", &probe, "--alignments", "alignments.jsonl", "--corpus", "train.jsonl", "--out", "geometry.json"]);
    let g: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("geometry.json")).unwrap()).unwrap();
    assert!(g["embedding"]["labels"].as_array().unwrap().len() > 1);
    assert!(g["aligned_knowledge_distance"].as_f64().unwrap() > 0.0);

    // Chat: blank lines re-prompt, `quit` leaves, EOF leaves, and the same
    // transcript gives the same replies.
    let script = format!("\n   \nwhat do you know about {probe} ?\ntell me about {probe} .\nquit\nnever read\n");
    let a = chat(d, &script, true);
    assert!(a.status.success(), "{}", stderr(&a));
    let replies: Vec<serde_json::Value> = stdout(&a).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(replies.len(), 2);
    assert_eq!(stdout(&chat(d, &script, true)), stdout(&a));
    let prompts = chat(d, "\n\nhi\n", false);
    assert!(prompts.status.success());
    assert_eq!(stdout(&prompts).matches("> ").count(), 4, "{}", stdout(&prompts));
    assert!(chat(d, "", false).status.success());
}
