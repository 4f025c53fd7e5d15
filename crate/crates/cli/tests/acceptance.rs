//! End-to-end acceptance checks, one PASS/FAIL line each. Exits nonzero if
//! any fails.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use duet_cli::bench::{self, BenchOptions};
use duet_cli::config::RunConfig;
use duet_cli::eval::{self, DEFAULT_MSE_RATIO};
use duet_cli::train::{self, read_metrics, METRICS_FILE, MODEL_FILE};
use duet_cli::verify::{self, Precision, VerifyOptions, GRAD_TOL, SCAN_LENGTHS};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> anyhow::Result<Outcome> {
    Ok(Outcome { pass, detail: detail.into() })
}

fn from_check(r: verify::CheckResult) -> anyhow::Result<Outcome> {
    outcome(r.status == verify::Status::Pass, r.detail)
}

fn scan_oracle() -> anyhow::Result<Outcome> {
    let start = Instant::now();
    let r = verify::scan_equivalence(&VerifyOptions { precision: Precision::F64, corrupt_scan: false }, &SCAN_LENGTHS)?;
    let fast = start.elapsed() < Duration::from_secs(30);
    outcome(r.status == verify::Status::Pass && fast, format!("{} (limit 30s)", r.detail))
}

fn gradient_check() -> anyhow::Result<Outcome> {
    let cfg = verify::tiny_gradcheck_config();
    let shape_ok = (cfg.d_model, cfg.d_state, cfg.seq_len, cfg.joints, cfg.n_blocks) == (8, 4, 6, 2, 1);
    let start = Instant::now();
    let r = verify::tiny_model_gradcheck()?;
    let secs = start.elapsed().as_secs_f64();
    outcome(
        shape_ok && r.passes(GRAD_TOL) && secs < 300.0,
        format!("{} entries, max rel err {:.3e} (tol {GRAD_TOL:.0e}) in {secs:.1}s", r.checked, r.max_rel_err),
    )
}

fn diffusion_round_trip() -> anyhow::Result<Outcome> {
    let a = verify::ddim_determinism()?;
    let b = verify::forward_noise_moments(100_000)?;
    let pass = a.status == verify::Status::Pass && b.status == verify::Status::Pass;
    outcome(pass, format!("{}; {}", a.detail, b.detail))
}

fn overfit(root: &Path) -> anyhow::Result<Outcome> {
    let mut cfg = RunConfig::preset("overfit")?;
    cfg.output_dir = root.join("overfit");
    let (m, d) = (&cfg.model, &cfg.data);
    let shape_ok = m.n_blocks == 1
        && (d.n_sequences, d.frames, d.joints, d.n_labels) == (8, 32, 5, 3)
        && cfg.optim.epochs <= 200
        && cfg.schedule.ddim_steps == 50;
    if !shape_ok {
        return outcome(false, "overfit preset does not match the experiment setup");
    }
    let start = Instant::now();
    let out = train::train(&cfg, false)?;
    let train_secs = start.elapsed().as_secs_f64();
    let rows = read_metrics(&out.output_dir.join(METRICS_FILE))?;
    let diff = |epoch: usize| rows.iter().find(|r| r.epoch == epoch && r.term == "diff").map(|r| r.value).unwrap_or(f64::NAN);
    let drop = diff(0) / diff(cfg.optim.epochs - 1);
    let r = eval::overfit_report(&cfg, &out.model_path(), 0, eval::DEFAULT_SAMPLES)?;
    let per_label: Vec<String> = r.labels.iter().map(|l| format!("{:.3}", l.trained / l.untrained)).collect();
    let secs = start.elapsed().as_secs_f64();
    outcome(
        r.ratio() <= DEFAULT_MSE_RATIO && secs < 1200.0,
        format!(
            "mse ratio {:.3} (limit {DEFAULT_MSE_RATIO}), per label [{}], diff loss fell {drop:.1}x, trained in {train_secs:.0}s, total {secs:.0}s",
            r.ratio(),
            per_label.join(", ")
        ),
    )
}

fn scaling() -> anyhow::Result<Outcome> {
    let report = bench::run(&BenchOptions {
        lengths: vec![1024, 2048, 4096],
        width: 64,
        repeats: 9,
        threads: 1,
        denoiser_max_len: 2048,
        seed: 0,
    })?;
    let detail: Vec<String> = report.verdicts.iter().map(|v| format!("{} {}", if v.pass { "ok" } else { "FAILED" }, v.detail)).collect();
    outcome(report.passed() && !report.verdicts.is_empty(), detail.join("; "))
}

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

fn cli(root: &Path, args: &[String]) -> anyhow::Result<()> {
    let out = Command::new(env!("CARGO_BIN_EXE_duet"))
        .env("DUET_OUTPUT_ROOT", root)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()?;
    anyhow::ensure!(out.status.success(), "duet {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr));
    Ok(())
}

fn train_tiny(root: &Path, dir: &str, epochs: usize, resume: bool) -> anyhow::Result<()> {
    let mut args = vec!["train".to_string()];
    for o in TINY.iter().map(|s| s.to_string()).chain([format!("optim.epochs={epochs}"), format!("output_dir={dir}")]) {
        args.extend(["--override".to_string(), o]);
    }
    if resume {
        args.push("--resume".into());
    }
    cli(root, &args)
}

fn determinism(root: &Path) -> anyhow::Result<Outcome> {
    train_tiny(root, "straight", 4, false)?;
    train_tiny(root, "split", 2, false)?;
    train_tiny(root, "split", 4, true)?;
    let (a, b) = (root.join("straight"), root.join("split"));
    let same_model = fs::read(a.join(MODEL_FILE))? == fs::read(b.join(MODEL_FILE))?;
    let same_metrics = read_metrics(&a.join(METRICS_FILE))? == read_metrics(&b.join(METRICS_FILE))?;

    let ckpt = a.join(MODEL_FILE).display().to_string();
    for out in ["s1", "s2"] {
        cli(root, &["sample", "--ckpt", &ckpt, "--label", "2", "--seed", "42", "--count", "3", "--out", out].map(String::from))?;
    }
    let mut files = 0;
    let mut same_samples = true;
    for entry in fs::read_dir(root.join("s1"))? {
        let name = entry?.file_name();
        same_samples &= fs::read(root.join("s1").join(&name))? == fs::read(root.join("s2").join(&name))?;
        files += 1;
    }
    let pass = same_model && same_metrics && same_samples && files == 6;
    outcome(
        pass,
        format!("resume: model identical {same_model}, metrics identical {same_metrics}; samples: {files} files identical {same_samples}"),
    )
}

fn main() {
    let root = tempfile::tempdir().expect("temporary directory");
    let criteria: Vec<(&str, Box<dyn Fn() -> anyhow::Result<Outcome>>)> = vec![
        ("scan oracle equivalence", Box::new(scan_oracle)),
        ("zoh correctness", Box::new(|| from_check(verify::zoh_pins()?))),
        ("whole-model gradient check", Box::new(gradient_check)),
        ("loss fixed points", Box::new(|| from_check(verify::loss_fixed_points(100)?))),
        ("schedule invariants", Box::new(|| from_check(verify::schedules()?))),
        ("diffusion round trip", Box::new(diffusion_round_trip)),
        ("overfit experiment", Box::new(|| overfit(root.path()))),
        ("linear vs quadratic scaling", Box::new(scaling)),
        ("determinism", Box::new(|| determinism(root.path()))),
        ("reduction property", Box::new(|| from_check(verify::reductions(10)?))),
    ];
    let mut failed = 0;
    for (name, check) in &criteria {
        let start = Instant::now();
        let (pass, detail) = match check() {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e:#}")),
        };
        failed += usize::from(!pass);
        println!("{} {name}: {detail} [{:.1}s]", if pass { "PASS" } else { "FAIL" }, start.elapsed().as_secs_f64());
    }
    println!("{} of {} acceptance criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
