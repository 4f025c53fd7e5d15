use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use duet_cli::train::{read_metrics, METRICS_FILE, MODEL_FILE, STATE_FILE};

const TINY: [&str; 12] = [
    "model.d_model=8",
    "model.cond_dim=8",
    "model.d_state=4",
    "model.seq_len=8",
    "model.n_blocks=1",
    "data.frames=8",
    "data.n_sequences=4",
    "optim.batch_size=2",
    "optim.lr=1e-3",
    "optim.checkpoint_every=1",
    "schedule.steps=100",
    "schedule.ddim_steps=5",
];

fn bin(root: &Path) -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_duet"));
    c.env("DUET_OUTPUT_ROOT", root).env("RUST_LOG", "warn");
    c
}

fn train(root: &Path, out: &str, epochs: usize, resume: bool) -> Output {
    let mut c = bin(root);
    c.arg("train");
    for o in TINY.iter().map(|s| s.to_string()).chain([format!("optim.epochs={epochs}"), format!("output_dir={out}")]) {
        c.args(["--override", &o]);
    }
    if resume {
        c.arg("--resume");
    }
    c.output().unwrap()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn train_writes_checkpoints_metrics_and_config() {
    let root = tempfile::tempdir().unwrap();
    ok(&train(root.path(), "run", 2, false));
    let dir = root.path().join("run");
    for f in [MODEL_FILE, STATE_FILE, METRICS_FILE, "config.toml"] {
        assert!(dir.join(f).exists(), "{f}");
    }
    let rows = read_metrics(&dir.join(METRICS_FILE)).unwrap();
    assert_eq!(rows.iter().map(|r| r.epoch).max(), Some(1));
    for term in ["diff", "total", "block0.w_alpha", "block0.w_beta", "block0.alpha_c", "block0.beta_c"] {
        assert_eq!(rows.iter().filter(|r| r.term == term).count(), 2, "{term}");
    }
    let echoed = fs::read_to_string(dir.join("config.toml")).unwrap();
    assert!(echoed.contains("d_model = 8"));
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let root = tempfile::tempdir().unwrap();
    ok(&train(root.path(), "straight", 4, false));
    ok(&train(root.path(), "split", 2, false));
    ok(&train(root.path(), "split", 4, true));
    let (a, b) = (root.path().join("straight"), root.path().join("split"));
    assert_eq!(fs::read(a.join(MODEL_FILE)).unwrap(), fs::read(b.join(MODEL_FILE)).unwrap());
    assert_eq!(read_metrics(&a.join(METRICS_FILE)).unwrap(), read_metrics(&b.join(METRICS_FILE)).unwrap());
}

#[test]
fn resume_rejects_changed_config() {
    let root = tempfile::tempdir().unwrap();
    ok(&train(root.path(), "run", 1, false));
    let out = bin(root.path())
        .args(["train", "--resume"])
        .args(TINY.iter().flat_map(|o| ["--override", o]))
        .args(["--override", "output_dir=run", "--override", "optim.lr=5e-4"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn sampling_is_repeatable_and_validates_labels() {
    let root = tempfile::tempdir().unwrap();
    ok(&train(root.path(), "run", 1, false));
    let ckpt = root.path().join("run").join(MODEL_FILE);
    let sample = |out: &str, label: &str, count: &str| {
        bin(root.path())
            .args(["sample", "--ckpt", ckpt.to_str().unwrap(), "--label", label, "--seed", "7", "--count", count, "--out", out])
            .output()
            .unwrap()
    };
    ok(&sample("a", "1", "2"));
    ok(&sample("b", "1", "2"));
    for name in ["sample_l1_s7_000.imm", "sample_l1_s7_001.imm", "sample_l1_s7_001.tsv"] {
        let (x, y) = (fs::read(root.path().join("a").join(name)).unwrap(), fs::read(root.path().join("b").join(name)).unwrap());
        assert_eq!(x, y, "{name}");
    }
    assert_ne!(fs::read(root.path().join("a/sample_l1_s7_000.imm")).unwrap(), fs::read(root.path().join("a/sample_l1_s7_001.imm")).unwrap());

    ok(&sample("empty", "0", "0"));
    assert!(!root.path().join("empty").exists());

    let bad = sample("c", "9", "1");
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("known labels: 0, 1, 2"));
}

#[test]
fn unknown_override_is_a_usage_error() {
    let root = tempfile::tempdir().unwrap();
    let out = bin(root.path()).args(["train", "--override", "optim.nope=1"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("optim.nope"));
}

#[test]
fn verify_reports_each_check() {
    let root = tempfile::tempdir().unwrap();
    let out = bin(root.path()).args(["verify", "--precision", "f32"]).output().unwrap();
    ok(&out);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("SKIP gradients: skipped: precision"), "{text}");
    assert!(text.contains("PASS scan_equivalence"));

    let out = bin(root.path()).args(["verify", "--corrupt-scan"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("scan_equivalence"));
}

#[test]
fn bench_emits_table_and_json() {
    let root = tempfile::tempdir().unwrap();
    let out = bin(root.path())
        .args(["bench", "--lengths", "8,16", "--width", "8", "--repeats", "1", "--denoiser-max-len", "8", "--json", "bench.json"])
        .output()
        .unwrap();
    ok(&out);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(root.path().join("bench.json")).unwrap()).unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 10);
    assert!(String::from_utf8_lossy(&out.stdout).contains("doubling ratios"));

    let bad = bin(root.path()).args(["bench", "--lengths", "16,8"]).output().unwrap();
    assert_eq!(bad.status.code(), Some(2));
}
