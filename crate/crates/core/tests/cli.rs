use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use sha2::{Digest, Sha256};

use geomshot::dataio::DatasetCatalog;
use geomshot::eval::{AblationTable, EvalReport};
use geomshot::nnet::Checkpoint;

fn geomshot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_geomshot"))
        .args(args)
        .env("RUST_LOG", "error")
        .env("GEOMSHOT_THREADS", "2")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = geomshot(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, name: &str, seed: &str, per_class: &str) -> PathBuf {
    let out = dir.join(name);
    ok(&["synth", "--classes", "6", "--per-class", per_class, "--seed", seed, "--out", s(&out)]);
    out
}

fn tree_digest(root: &Path) -> String {
    let mut files = Vec::new();
    for class in fs::read_dir(root).unwrap() {
        let class = class.unwrap().path();
        if class.is_dir() {
            for f in fs::read_dir(&class).unwrap() {
                files.push(f.unwrap().path());
            }
        }
    }
    files.sort();
    let mut h = Sha256::new();
    for f in files {
        h.update(f.strip_prefix(root).unwrap().to_str().unwrap());
        h.update(fs::read(&f).unwrap());
    }
    hex::encode(h.finalize())
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path
}

const FAST_TRAIN: &str = "[train]\nmax_epochs = 2\nepisodes_per_epoch = 5\nmonitor_episodes = 5\nadapt_epochs = 2\n\
[train.encoder]\nhidden_dim = 16\nembed_dim = 8\n";

#[test]
fn synth_trees_decode_and_repeat_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), "a", "3", "12");
    let b = synth(dir.path(), "b", "3", "12");
    let c = synth(dir.path(), "c", "4", "12");
    let cat = DatasetCatalog::load(&a).unwrap();
    assert_eq!(cat.classes.len(), 6);
    assert_eq!(cat.samples.len(), 72);
    assert_eq!(cat.skipped, 0);
    assert_eq!(tree_digest(&a), tree_digest(&b));
    assert_ne!(tree_digest(&a), tree_digest(&c));
}

#[test]
fn split_command_writes_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "data", "1", "10");
    let (x, y) = (dir.path().join("x.json"), dir.path().join("y.json"));
    ok(&["split", "--data-root", s(&data), "--out", s(&x)]);
    ok(&["split", "--data-root", s(&data), "--out", s(&y)]);
    assert_eq!(fs::read(&x).unwrap(), fs::read(&y).unwrap());
    assert!(dir.path().join("x.manifest.json").is_file());
}

#[test]
fn eval_writes_report_and_manifest_that_replays() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "data", "2", "80");
    let cfg = write_config(dir.path(), "run.toml", "schema_version = 1\n[data]\nroot = \"data\"\n");
    let runs = dir.path().join("runs");
    ok(&["eval", "--config", s(&cfg), "--out", s(&runs), "--run-id", "first"]);
    let report = EvalReport::load(runs.join("first/report.json")).unwrap();
    assert_eq!(report.episode_accuracies.len(), 600);
    assert_eq!(report.config.encoder, "none");
    assert!(runs.join("first/tables/results.csv").is_file());
    assert!(runs.join("first/error_analysis.json").is_file());

    let manifest = runs.join("first/manifest.json");
    ok(&["eval", "--config", s(&manifest), "--out", s(&runs), "--run-id", "replay"]);
    assert_eq!(
        fs::read(runs.join("first/report.json")).unwrap(),
        fs::read(runs.join("replay/report.json")).unwrap()
    );
}

#[test]
fn train_pretrain_and_adapt_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "src", "5", "80");
    synth(dir.path(), "dst", "6", "80");
    let src = write_config(dir.path(), "src.toml", &format!("schema_version = 1\n[data]\nroot = \"src\"\n{FAST_TRAIN}"));
    let dst = write_config(dir.path(), "dst.toml", &format!("schema_version = 1\n[data]\nroot = \"dst\"\n{FAST_TRAIN}"));
    let runs = dir.path().join("runs");

    ok(&["train", "--config", s(&dst), "--out", s(&runs), "--run-id", "within"]);
    assert!(runs.join("within/checkpoints/encoder.ckpt").is_file());
    assert_eq!(fs::read_to_string(runs.join("within/train_log.jsonl")).unwrap().lines().count(), 2);

    ok(&["pretrain", "--config", s(&src), "--out", s(&runs), "--run-id", "pre"]);
    let source = runs.join("pre/checkpoints/source.ckpt");
    assert_eq!(Checkpoint::load(&source).unwrap().meta.source.as_deref(), Some("src"));

    ok(&["adapt", "--config", s(&dst), "--out", s(&runs), "--run-id", "frozen", "--checkpoint", s(&source), "--mode", "frozen"]);
    let frozen = runs.join("frozen/checkpoints/adapted.ckpt");
    assert_eq!(
        Sha256::digest(fs::read(&source).unwrap()),
        Sha256::digest(fs::read(&frozen).unwrap())
    );

    ok(&[
        "adapt", "--config", s(&dst), "--out", s(&runs), "--run-id", "tuned", "--checkpoint", s(&source), "--mode",
        "target_supervised",
    ]);
    let tuned = Checkpoint::load(runs.join("tuned/checkpoints/adapted.ckpt")).unwrap();
    assert_ne!(tuned, Checkpoint::load(&source).unwrap());

    ok(&["eval", "--config", s(&dst), "--out", s(&runs), "--run-id", "ev", "--checkpoint", s(&frozen)]);
    let report = EvalReport::load(runs.join("ev/report.json")).unwrap();
    assert!(report.config.encoder.starts_with("mlp:sha256:"));
}

#[test]
fn ablation_produces_three_settings_by_three_shots() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "data", "7", "80");
    let cfg = write_config(dir.path(), "run.toml", "schema_version = 1\n[data]\nroot = \"data\"\n[eval]\nepisodes = 50\n");
    let runs = dir.path().join("runs");
    ok(&["ablate", "--config", s(&cfg), "--out", s(&runs), "--run-id", "ab"]);
    let table: AblationTable = serde_json::from_slice(&fs::read(runs.join("ab/report.json")).unwrap()).unwrap();
    assert_eq!(table.rows.len(), 3);
    for row in &table.rows {
        let shots: Vec<usize> = row.cells.iter().map(|c| c.k_shot).collect();
        assert_eq!(shots, vec![1, 3, 5]);
    }
    let csv = fs::read_to_string(runs.join("ab/tables/ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 9);
}

#[test]
fn export_builds_csv_and_latex() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "data", "8", "80");
    let cfg = write_config(dir.path(), "run.toml", "schema_version = 1\n[data]\nroot = \"data\"\n[eval]\nepisodes = 20\n");
    let runs = dir.path().join("runs");
    ok(&["eval", "--config", s(&cfg), "--out", s(&runs), "--run-id", "e"]);
    let report = runs.join("e/report.json");
    let csv = dir.path().join("table.csv");
    let tex = dir.path().join("table.tex");
    ok(&["export", "--reports", s(&report), "--dataset", "synth", "--out", s(&csv), "--latex", s(&tex)]);
    assert!(fs::read_to_string(&tex).unwrap().contains("\\begin{tabular}"));
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("dataset,repr,encoder,mode,K,mean,ci95"), "{text}");
    assert_eq!(text.lines().count(), 2);
}

#[test]
fn exit_codes_distinguish_failure_kinds() {
    let dir = tempfile::tempdir().unwrap();
    let runs = dir.path().join("runs");
    let code = |args: &[&str]| geomshot(args).status.code();

    let bad_key = write_config(dir.path(), "bad.toml", "schema_version = 1\nbogus = 1\n[data]\nroot = \"x\"\n");
    assert_eq!(code(&["eval", "--config", s(&bad_key), "--out", s(&runs)]), Some(2));
    assert_eq!(code(&["eval", "--no-such-flag"]), Some(2));

    let missing = write_config(dir.path(), "missing.toml", "schema_version = 1\n[data]\nroot = \"nowhere\"\n");
    assert_eq!(code(&["eval", "--config", s(&missing), "--out", s(&runs)]), Some(3));

    synth(dir.path(), "small", "9", "10");
    let small = write_config(dir.path(), "small.toml", "schema_version = 1\n[data]\nroot = \"small\"\n");
    assert_eq!(code(&["eval", "--config", s(&small), "--out", s(&runs)]), Some(4));

    synth(dir.path(), "data", "9", "80");
    let raw = write_config(
        dir.path(),
        "raw.toml",
        &format!("schema_version = 1\n[data]\nroot = \"data\"\nrepresentation = \"raw\"\n{FAST_TRAIN}"),
    );
    ok(&["pretrain", "--config", s(&raw), "--out", s(&runs), "--run-id", "raw"]);
    let angle = write_config(dir.path(), "angle.toml", "schema_version = 1\n[data]\nroot = \"data\"\n");
    let ck = runs.join("raw/checkpoints/source.ckpt");
    assert_eq!(code(&["eval", "--config", s(&angle), "--out", s(&runs), "--checkpoint", s(&ck)]), Some(5));

    let corrupt = dir.path().join("corrupt.ckpt");
    fs::write(&corrupt, b"\x05\0\0\0\0\0\0\0{}").unwrap();
    assert_eq!(code(&["eval", "--config", s(&angle), "--out", s(&runs), "--checkpoint", s(&corrupt)]), Some(6));
}
