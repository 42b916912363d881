use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const TINY_CONFIG: &str = "\
# small model so the pipeline runs in seconds
seed = 3
k = 8
heads = 2
layers_mlm = 1
layers_feat = 1
ff_dim = 16
max_len = 64
batch_size = 4
epochs_cl = 2
epochs_ft = 1
min_frequency = 1
margin = 4.0
";

fn clear(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clear"))
        .args(args)
        .env_remove("CLEAR_SEED")
        .output()
        .unwrap()
}

fn clear_seeded(args: &[&str], seed: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clear"))
        .args(args)
        .env("CLEAR_SEED", seed)
        .output()
        .unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

struct Workspace {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        fs::write(root.join("tiny.cfg"), TINY_CONFIG).unwrap();
        let o = clear(&[
            "synth",
            "--n",
            "30",
            "--vuln-fraction",
            "0.3",
            "--seed",
            "7",
            "--out",
            s(&root.join("c.jsonl")),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        Self { _dir: dir, root }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn pretrain(&self, out: &str) -> Output {
        clear(&[
            "pretrain",
            "--corpus",
            s(&self.path("c.jsonl")),
            "--task",
            "ORDER",
            "--config",
            s(&self.path("tiny.cfg")),
            "--out",
            s(&self.path(out)),
        ])
    }

    fn finetune(&self, ckpt: &str, out: &str) -> Output {
        clear(&[
            "finetune",
            "--ckpt",
            s(&self.path(ckpt)),
            "--corpus",
            s(&self.path("c.jsonl")),
            "--out",
            s(&self.path(out)),
        ])
    }
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn loss_lines(path: &Path) -> Vec<Value> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| {
            let mut v: Value = serde_json::from_str(l).unwrap();
            v.as_object_mut().unwrap().remove("wall_time");
            v
        })
        .collect()
}

#[test]
fn synth_writes_requested_corpus() {
    let ws = Workspace::new();
    let text = fs::read_to_string(ws.path("c.jsonl")).unwrap();
    let lines: Vec<Value> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 30);
    let vulnerable = lines.iter().filter(|v| v["labels"]["ORDER"] == 1).count();
    assert_eq!(vulnerable, 9);
}

#[test]
fn pretrain_writes_manifest_checkpoint_and_log() {
    let ws = Workspace::new();
    let o = ws.pretrain("pre");
    assert!(o.status.success(), "{}", stderr(&o));
    let out = ws.path("pre");
    let run = read_json(&out.join("run_manifest.json"));
    assert_eq!(run["command"], "pretrain");
    let ckpt = read_json(&out.join("manifest.json"));
    assert_eq!(ckpt["stage"], "cl");
    assert_eq!(ckpt["epoch"], 2);
    assert!(out.join("best").join("manifest.json").exists());
    assert!(out
        .join("series")
        .join("epoch-001")
        .join("params.bin")
        .exists());
    assert_eq!(loss_lines(&out.join("train_log.jsonl")).len(), 2);
}

#[test]
fn rerun_reproduces_loss_log() {
    let ws = Workspace::new();
    assert!(ws.pretrain("a").status.success());
    assert!(ws.pretrain("b").status.success());
    assert_eq!(
        loss_lines(&ws.path("a/train_log.jsonl")),
        loss_lines(&ws.path("b/train_log.jsonl"))
    );
}

#[test]
fn seed_environment_variable_overrides_config() {
    let ws = Workspace::new();
    let (corpus, cfg, out) = (ws.path("c.jsonl"), ws.path("tiny.cfg"), ws.path("seeded"));
    let args = [
        "pretrain",
        "--corpus",
        s(&corpus),
        "--task",
        "ORDER",
        "--config",
        s(&cfg),
        "--out",
        s(&out),
    ];
    let o = clear_seeded(&args, "41");
    assert!(o.status.success(), "{}", stderr(&o));
    let ckpt = read_json(&ws.path("seeded/manifest.json"));
    assert_eq!(ckpt["config"]["train"]["seed"], 41);
}

#[test]
fn eval_on_pretrained_directory_is_a_stage_mismatch() {
    let ws = Workspace::new();
    assert!(ws.pretrain("pre").status.success());
    let o = clear(&[
        "eval",
        "--model",
        s(&ws.path("pre")),
        "--corpus",
        s(&ws.path("c.jsonl")),
        "--report",
        s(&ws.path("m.json")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("stage mismatch"), "{}", stderr(&o));
}

#[test]
fn finetune_eval_and_detect() {
    let ws = Workspace::new();
    assert!(ws.pretrain("pre").status.success());
    let o = ws.finetune("pre", "ft");
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(read_json(&ws.path("ft/manifest.json"))["stage"], "ft");

    let o = clear(&[
        "eval",
        "--model",
        s(&ws.path("ft")),
        "--corpus",
        s(&ws.path("c.jsonl")),
        "--report",
        s(&ws.path("m.json")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = read_json(&ws.path("m.json"));
    let counts = ["tp", "fp", "tn", "fn"]
        .iter()
        .map(|k| m[k].as_u64().unwrap())
        .sum::<u64>();
    assert_eq!(counts, 6);

    let sol = ws.path("a.sol");
    fs::write(
        &sol,
        clear_core::corpus::generate_contract(7, 9999, true).source,
    )
    .unwrap();
    let o = clear(&[
        "detect",
        "--model",
        s(&ws.path("ft")),
        "--task",
        "ORDER",
        "--file",
        s(&sol),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 1);
    let p: Value = serde_json::from_str(stdout.trim()).unwrap();
    assert_eq!(p["id"], "a");
    assert_eq!(p["task"], "ORDER");
    let prob = p["probability"].as_f64().unwrap();
    assert!(prob > 0.0 && prob < 1.0);
    assert_eq!(p["verdict"].as_u64().unwrap(), u64::from(prob >= 0.5));
}

#[test]
fn finetune_rejects_finetuned_checkpoint() {
    let ws = Workspace::new();
    assert!(ws.pretrain("pre").status.success());
    assert!(ws.finetune("pre", "ft").status.success());
    let o = ws.finetune("ft", "ft2");
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("stage mismatch"));
}

#[test]
fn export_embeddings_writes_csv_per_epoch() {
    let ws = Workspace::new();
    assert!(ws.pretrain("pre").status.success());
    let o = clear(&[
        "export-embeddings",
        "--ckpt-series",
        s(&ws.path("pre/series")),
        "--corpus",
        s(&ws.path("c.jsonl")),
        "--out",
        s(&ws.path("emb")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(ws.path("emb/embeddings.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("epoch,id,label,x,y"));
    assert_eq!(lines.count(), 60);
    let summary = read_json(&ws.path("emb/explained_variance.json"));
    assert_eq!(summary.as_array().unwrap().len(), 2);
}

#[test]
fn ablate_writes_one_report_per_variant() {
    let ws = Workspace::new();
    let o = clear(&[
        "ablate",
        "--corpus",
        s(&ws.path("c.jsonl")),
        "--config",
        s(&ws.path("tiny.cfg")),
        "--task",
        "ORDER",
        "--variants",
        "full,rcl",
        "--out",
        s(&ws.path("abl")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for tag in ["full", "rcl"] {
        assert_eq!(
            read_json(&ws.path(&format!("abl/{tag}/metrics.json")))["variant"],
            tag
        );
    }
    assert!(ws.path("abl/summary.json").exists());
    assert!(ws.path("abl/run_manifest.json").exists());
}

#[test]
fn ingest_directory_with_labels() {
    let ws = Workspace::new();
    let dir = ws.path("src");
    fs::create_dir(&dir).unwrap();
    fs::write(dir.join("x.sol"), "contract X { function f() public {} }").unwrap();
    fs::write(dir.join("y.sol"), "contract Y { uint a = 1; }").unwrap();
    fs::write(dir.join("labels.csv"), "id,RE,TD\nx,1,0\ny,0,1\n").unwrap();
    let o = clear(&[
        "ingest",
        "--input",
        s(&dir),
        "--out",
        s(&ws.path("ing.jsonl")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(ws.path("ing.jsonl")).unwrap();
    let rows: Vec<Value> = text
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0]["id"], "x");
    assert_eq!(rows[0]["labels"]["RE"], 1);
    assert_eq!(rows[1]["labels"]["TD"], 1);
}

#[test]
fn unknown_config_key_is_a_validation_error() {
    let ws = Workspace::new();
    fs::write(ws.path("bad.cfg"), "epochs_cl = 1\nlearnig_rate = 0.1\n").unwrap();
    let o = clear(&[
        "pretrain",
        "--corpus",
        s(&ws.path("c.jsonl")),
        "--task",
        "ORDER",
        "--config",
        s(&ws.path("bad.cfg")),
        "--out",
        s(&ws.path("x")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learnig_rate"));
}

#[test]
fn missing_corpus_is_a_runtime_failure() {
    let ws = Workspace::new();
    let o = clear(&[
        "eval",
        "--model",
        s(&ws.path("nothing")),
        "--corpus",
        s(&ws.path("c.jsonl")),
        "--report",
        s(&ws.path("m.json")),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn unknown_subcommand_and_flag_print_usage() {
    for args in [
        &["frobnicate"][..],
        &["synth", "--n", "10", "--bogus"][..],
        &[][..],
    ] {
        let o = clear(args);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        assert!(stderr(&o).contains("Usage"), "{args:?}: {}", stderr(&o));
    }
}
