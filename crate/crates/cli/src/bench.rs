//! Sequence-length scaling benchmark: scan schedules and attention on raw
//! f32 buffers, plus both full denoisers in f64.

use std::time::Instant;

use anyhow::bail;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use duet::attention::{attention_block_forward, AttnBlock, AttnDenoiser, DEFAULT_HEADS};
use duet::blocks::{CondBatch, Denoiser, DenoiserConfig, X0Model};
use duet::kernels::{scan_chunked, scan_parallel, scan_sequential, Combine, Lanes, ScanProblem, DEFAULT_CHUNK};
use duet::ssm::random_problem;
use duet::{no_grad, Module, ParamFactory, Tensor};

pub const SCAN_STATE: usize = 16;
pub const DEFAULT_LENGTHS: [usize; 5] = [256, 512, 1024, 2048, 4096];
pub const DEFAULT_DENOISER_MAX_LEN: usize = 2048;

pub const SCAN_RATIO_BOUNDS: (f64, f64) = (1.5, 2.6);
pub const SCAN_RATIO_FROM: usize = 1024;
pub const ATTN_RATIO_MIN: f64 = 3.0;
pub const ATTN_RATIO_FROM: usize = 2048;
pub const DENOISER_SPEEDUP_MIN: f64 = 1.5;
pub const DENOISER_SPEEDUP_AT: usize = 2048;

/// Scan schedules whose doubling ratios are held to the linear bounds.
pub const LINEAR_METHODS: [&str; 3] = ["scan_sequential", "scan_parallel", "scan_chunked"];

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub lengths: Vec<usize>,
    pub width: usize,
    pub repeats: usize,
    /// Values above 1 add a second set of rows run on a pool of this size.
    pub threads: usize,
    pub denoiser_max_len: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            lengths: DEFAULT_LENGTHS.to_vec(),
            width: 64,
            repeats: 9,
            threads: 1,
            denoiser_max_len: DEFAULT_DENOISER_MAX_LEN,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Row {
    pub method: String,
    pub threads: usize,
    pub len: usize,
    pub median_ms: f64,
    pub min_ms: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Ratio {
    pub method: String,
    pub threads: usize,
    pub from: usize,
    pub to: usize,
    pub ratio: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Verdict {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchReport {
    pub width: usize,
    pub state: usize,
    pub repeats: usize,
    pub rows: Vec<Row>,
    pub ratios: Vec<Ratio>,
    pub params_ssm: usize,
    pub params_attention: usize,
    pub verdicts: Vec<Verdict>,
}

impl BenchReport {
    pub fn passed(&self) -> bool {
        self.verdicts.iter().all(|v| v.pass)
    }

    pub fn median(&self, method: &str, threads: usize, len: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.method == method && r.threads == threads && r.len == len).map(|r| r.median_ms)
    }

    pub fn summary(&self) -> String {
        let mut s = format!("width {}, state {}, median of {} runs\n", self.width, self.state, self.repeats);
        s.push_str(&format!("{:<20} {:>7} {:>8} {:>12} {:>12}\n", "method", "threads", "L", "median ms", "min ms"));
        for r in &self.rows {
            s.push_str(&format!("{:<20} {:>7} {:>8} {:>12.3} {:>12.3}\n", r.method, r.threads, r.len, r.median_ms, r.min_ms));
        }
        s.push_str("\ndoubling ratios\n");
        for r in &self.ratios {
            s.push_str(&format!("{:<20} {:>7} {:>6} -> {:<6} {:>7.2}\n", r.method, r.threads, r.from, r.to, r.ratio));
        }
        s.push_str(&format!("\nparameters: ssm denoiser {}, attention denoiser {}\n", self.params_ssm, self.params_attention));
        for v in &self.verdicts {
            s.push_str(&format!("{} {}: {}\n", if v.pass { "PASS" } else { "FAIL" }, v.name, v.detail));
        }
        s
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// One untimed warmup, then `repeats` timed calls.
fn time_ms(repeats: usize, mut f: impl FnMut()) -> (f64, f64) {
    f();
    let samples: Vec<f64> = (0..repeats)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    let min = samples.iter().copied().fold(f64::INFINITY, f64::min);
    (median(samples), min)
}

/// Model config used for the denoiser rows at sequence length `len`.
pub fn denoiser_config(width: usize, len: usize) -> DenoiserConfig {
    DenoiserConfig { d_model: width, cond_dim: width, seq_len: len, ..DenoiserConfig::default() }
}

fn micro_rows(opts: &BenchOptions, threads: usize, rows: &mut Vec<Row>) -> anyhow::Result<()> {
    let lanes = if threads > 1 { Lanes::Threaded } else { Lanes::Serial };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let attn = AttnBlock::new(&ParamFactory::new(opts.seed), opts.width, DEFAULT_HEADS)?.weights::<f32>();
    for &len in &opts.lengths {
        let rp = random_problem(&mut rng, 1, len, opts.width, SCAN_STATE);
        let [x, delta, a, b, c] = rp.to_f32();
        let p = ScanProblem { batch: 1, len, channels: opts.width, state: SCAN_STATE, x: &x, delta: &delta, a: &a, b: &b, c: &c };
        let mut push = |method: &str, (median_ms, min_ms): (f64, f64)| {
            rows.push(Row { method: method.into(), threads, len, median_ms, min_ms })
        };
        push("scan_sequential", time_ms(opts.repeats, || drop(scan_sequential(&p, false, lanes).expect("valid problem"))));
        push(
            "scan_parallel",
            time_ms(opts.repeats, || drop(scan_parallel(&p, false, lanes, Combine::Affine).expect("valid problem"))),
        );
        push(
            "scan_chunked",
            time_ms(opts.repeats, || {
                drop(scan_chunked(&p, DEFAULT_CHUNK, false, lanes, Combine::Affine).expect("valid problem"))
            }),
        );
        push(
            "attention",
            time_ms(opts.repeats, || drop(attention_block_forward(&x, 1, len, &attn, threads > 1).expect("valid input"))),
        );
    }
    Ok(())
}

fn denoiser_rows(opts: &BenchOptions, threads: usize, rows: &mut Vec<Row>) -> anyhow::Result<()> {
    let _g = no_grad();
    for &len in opts.lengths.iter().filter(|&&l| l <= opts.denoiser_max_len) {
        let cfg = denoiser_config(opts.width, len);
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ len as u64);
        let x = Tensor::randn(&[1, 2, len, cfg.pose_dim()], &mut rng);
        let cond = CondBatch::new(vec![500], vec![0], vec![false])?;
        let ssm = Denoiser::new(cfg.clone(), opts.seed)?;
        let attn = AttnDenoiser::new(cfg, DEFAULT_HEADS, opts.seed)?;
        let models: [(&str, &dyn X0Model); 2] = [("denoiser_ssm", &ssm), ("denoiser_attention", &attn)];
        for (method, m) in models {
            let (median_ms, min_ms) = time_ms(opts.repeats, || drop(m.predict_x0(&x, &cond).expect("valid input")));
            rows.push(Row { method: method.into(), threads, len, median_ms, min_ms });
        }
    }
    Ok(())
}

fn doubling_ratios(rows: &[Row]) -> Vec<Ratio> {
    let mut out = Vec::new();
    for (i, r) in rows.iter().enumerate() {
        if let Some(next) = rows[i + 1..].iter().find(|n| n.method == r.method && n.threads == r.threads && n.len == 2 * r.len) {
            out.push(Ratio { method: r.method.clone(), threads: r.threads, from: r.len, to: next.len, ratio: next.median_ms / r.median_ms });
        }
    }
    out
}

fn verdicts(report: &BenchReport) -> Vec<Verdict> {
    let mut out = Vec::new();
    let single = |r: &&Ratio| r.threads == 1;
    for method in LINEAR_METHODS {
        let rs: Vec<&Ratio> =
            report.ratios.iter().filter(single).filter(|r| r.method == method && r.from >= SCAN_RATIO_FROM).collect();
        if rs.is_empty() {
            continue;
        }
        let (lo, hi) = SCAN_RATIO_BOUNDS;
        out.push(Verdict {
            name: format!("{method} doubling"),
            pass: rs.iter().all(|r| (lo..=hi).contains(&r.ratio)),
            detail: format!("{} within [{lo}, {hi}]", fmt_ratios(&rs)),
        });
    }
    let rs: Vec<&Ratio> =
        report.ratios.iter().filter(single).filter(|r| r.method == "attention" && r.from >= ATTN_RATIO_FROM).collect();
    if !rs.is_empty() {
        out.push(Verdict {
            name: "attention doubling".into(),
            pass: rs.iter().all(|r| r.ratio >= ATTN_RATIO_MIN),
            detail: format!("{} at least {ATTN_RATIO_MIN}", fmt_ratios(&rs)),
        });
    }
    let at = DENOISER_SPEEDUP_AT;
    if let (Some(s), Some(a)) = (report.median("denoiser_ssm", 1, at), report.median("denoiser_attention", 1, at)) {
        let speedup = a / s;
        out.push(Verdict {
            name: format!("denoiser speedup at L={at}"),
            pass: speedup >= DENOISER_SPEEDUP_MIN,
            detail: format!("attention {a:.1} ms / ssm {s:.1} ms = {speedup:.2}, need at least {DENOISER_SPEEDUP_MIN}"),
        });
    }
    out
}

fn fmt_ratios(rs: &[&Ratio]) -> String {
    rs.iter().map(|r| format!("{}->{}: {:.2}", r.from, r.to, r.ratio)).collect::<Vec<_>>().join(", ")
}

pub fn run(opts: &BenchOptions) -> anyhow::Result<BenchReport> {
    if opts.lengths.is_empty() || opts.lengths.windows(2).any(|w| w[0] >= w[1]) || opts.lengths[0] == 0 {
        bail!(crate::config::usage("lengths must be positive and strictly ascending"));
    }
    if opts.width == 0 || opts.width % DEFAULT_HEADS != 0 {
        bail!(crate::config::usage(format!("width must be a positive multiple of {DEFAULT_HEADS}")));
    }
    if opts.repeats == 0 || opts.threads == 0 {
        bail!(crate::config::usage("repeats and threads must be at least 1"));
    }
    let mut rows = Vec::new();
    micro_rows(opts, 1, &mut rows)?;
    denoiser_rows(opts, 1, &mut rows)?;
    if opts.threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(opts.threads).build()?;
        pool.install(|| micro_rows(opts, opts.threads, &mut rows))?;
    }
    let desk = denoiser_config(opts.width, DenoiserConfig::default().seq_len);
    let mut report = BenchReport {
        width: opts.width,
        state: SCAN_STATE,
        repeats: opts.repeats,
        ratios: doubling_ratios(&rows),
        rows,
        params_ssm: Denoiser::new(desk.clone(), 0)?.param_count(),
        params_attention: AttnDenoiser::new(desk, DEFAULT_HEADS, 0)?.param_count(),
        verdicts: Vec::new(),
    };
    report.verdicts = verdicts(&report);
    Ok(report)
}
