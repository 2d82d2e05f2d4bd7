use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
n_clients = 3
rounds = 2
local_epochs = 1
n_train = 48
n_test = 16

[model]
n_layers = 1
d_model = 8
n_heads = 2
ff_dim = 16
vocab_size = 96
max_seq_len = 48
seed = 1

[pretrain]
steps = 3
warmup_steps = 1

[corpus]
n_docs = 12
doc_len = 48
"#;

fn ificl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ificl"))
        .args(args)
        .env("IFICL_LOG", "error")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = ificl(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    checkpoint: PathBuf,
}

fn fixture(manifest: &str) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let config = root.join("run.toml");
    std::fs::write(&config, manifest).unwrap();
    let checkpoint = root.join("model.iftm");
    ok(&["pretrain", "--config", s(&config), "--checkpoint", s(&checkpoint)]);
    Fixture {
        _dir: dir,
        root,
        config,
        checkpoint,
    }
}

#[test]
fn pretrain_is_reproducible_and_reports_losses() {
    let f = fixture(TINY);
    let again = f.root.join("again.iftm");
    let stdout = ok(&["pretrain", "--config", s(&f.config), "--checkpoint", s(&again), "--threads", "2"]);
    assert_eq!(std::fs::read(&f.checkpoint).unwrap(), std::fs::read(&again).unwrap());
    let summary: serde_json::Value = serde_json::from_str(&stdout).unwrap();
    assert!(summary["report"]["heldout_loss"].is_number());

    let reseeded = f.root.join("reseeded.iftm");
    ok(&["pretrain", "--config", s(&f.config), "--checkpoint", s(&reseeded), "--seed", "99"]);
    assert_ne!(std::fs::read(&f.checkpoint).unwrap(), std::fs::read(&reseeded).unwrap());
}

#[test]
fn missing_inputs_fail_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let out = ificl(&["pretrain", "--config", "/nonexistent/run.toml", "--checkpoint", s(&dir.path().join("m"))]);
    assert!(!out.status.success());
    assert!(out.stdout.is_empty());
    assert!(!out.stderr.is_empty());
    assert!(!ificl(&["pretrain"]).status.success());
    assert!(!ificl(&["compare", "--report", "/nonexistent.json"]).status.success());
}

#[test]
fn run_then_compare() {
    let f = fixture(TINY);
    let report = f.root.join("report.json");
    let stdout = ok(&[
        "run",
        "--config",
        s(&f.config),
        "--checkpoint",
        s(&f.checkpoint),
        "--report",
        s(&report),
        "--seed",
        "4",
    ]);
    for m in ["zero_shot", "local_icl", "ifed_icl", "local_only_injection"] {
        assert!(stdout.contains(m), "{stdout}");
    }
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["seed"], 4);
    assert_eq!(json["schema_version"], 1);

    let rows = ok(&["compare", "--report", s(&report)]);
    let lines: Vec<&str> = rows.lines().collect();
    assert_eq!(lines.len(), 1 + 2);
    assert!(lines[0].starts_with("round\tglobal\tmean_local"));
}

#[test]
fn checkpoint_for_another_shape_is_rejected() {
    let f = fixture(TINY);
    let other = f.root.join("other.toml");
    std::fs::write(&other, TINY.replace("d_model = 8", "d_model = 16")).unwrap();
    let out = ificl(&[
        "run",
        "--config",
        s(&other),
        "--checkpoint",
        s(&f.checkpoint),
        "--report",
        s(&f.root.join("r.json")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("checkpoint"));
    assert!(!f.root.join("r.json").exists());
}

#[test]
fn serve_caches_across_invocations() {
    let f = fixture(TINY);
    let requests = f.root.join("requests.jsonl");
    std::fs::write(&requests, "{\"task_id\":\"topic\"}\n{\"task_id\":\"topic\"}\n{\"task_id\":\"topic\",\"scheme\":1}\n")
        .unwrap();
    let store = f.root.join("store");
    let stream = f.root.join("outcomes.jsonl");
    let args = [
        "serve",
        "--config",
        s(&f.config),
        "--checkpoint",
        s(&f.checkpoint),
        "--store",
        s(&store),
        "--requests",
        s(&requests),
        "--report",
        s(&stream),
    ];
    ok(&args);
    ok(&args);
    let outcomes: Vec<serde_json::Value> = std::fs::read_to_string(&stream)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let hits: Vec<bool> = outcomes.iter().map(|o| o["cache_hit"].as_bool().unwrap()).collect();
    assert_eq!(hits, [false, true, false, true, true, true]);
    assert_eq!(outcomes[1]["training_steps"], 0);
    assert_eq!(outcomes[0]["coefficients_digest"], outcomes[4]["coefficients_digest"]);
}
