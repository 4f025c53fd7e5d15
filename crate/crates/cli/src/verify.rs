//! Oracle suite run by the `verify` command. The acceptance test drives the
//! same checks at their full sizes.

use std::fmt;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use duet::blocks::{CondBatch, CrossAstmBlock, Denoiser, DenoiserConfig, SelfAstmBlock, X0Model};
use duet::diffusion::{cosine_schedule, ddim_sample, forward_noise, GuidanceConfig, DEFAULT_OFFSET};
use duet::gradcheck::{check, jitter_parameters, GradCheckReport, DEFAULT_STEP};
use duet::kernels::{max_rel_diff, scan_chunked, scan_parallel, scan_sequential, zoh, Combine, Lanes, Real, ScanMode, ScanProblem, DEFAULT_CHUNK};
use duet::motion::{loss_total, normalize, stack_pairs, toy_dataset_generate, LossWeights, NormStats, Skeleton};
use duet::ssm::{discretize_zoh, random_problem, selective_scan, SsmCore};
use duet::{no_grad, Module, ParamFactory, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Precision {
    F64,
    F32,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Status {
    Pass,
    Fail,
    Skipped(String),
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub status: Status,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &'static str, pass: bool, detail: String) -> Self {
        Self { name, status: if pass { Status::Pass } else { Status::Fail }, detail }
    }

    pub fn passed(&self) -> bool {
        self.status != Status::Fail
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.status {
            Status::Pass => write!(f, "PASS {}: {}", self.name, self.detail),
            Status::Fail => write!(f, "FAIL {}: {}", self.name, self.detail),
            Status::Skipped(why) => write!(f, "SKIP {}: skipped: {why}", self.name),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct VerifyOptions {
    pub precision: Precision,
    /// Test hook: run the parallel schedules with a wrong combine operator.
    pub corrupt_scan: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { precision: Precision::F64, corrupt_scan: false }
    }
}

pub const SCAN_LENGTHS: [usize; 7] = [1, 2, 3, 7, 64, 257, 1024];
pub const SCAN_CHANNELS: [usize; 3] = [1, 4, 8];
pub const SCAN_STATES: [usize; 2] = [1, 16];
pub const SCAN_TOL_F64: f64 = 1e-5;
pub const SCAN_TOL_F32: f64 = 1e-3;
/// Relative-error denominators below this are clamped up to it.
pub const SCAN_FLOOR_F64: f64 = 1e-8;
pub const SCAN_FLOOR_F32: f64 = 1e-3;

fn scan_grid_max<T: Real>(rng: &mut ChaCha8Rng, lengths: &[usize], combine: Combine, cast: impl Fn(&[f64]) -> Vec<T>, floor: f64) -> anyhow::Result<f64> {
    let mut worst = 0.0f64;
    for &len in lengths {
        for d in SCAN_CHANNELS {
            for n in SCAN_STATES {
                let rp = random_problem(rng, 2, len, d, n);
                let (x, delta, a, b, c) = (cast(&rp.x), cast(&rp.delta), cast(&rp.a), cast(&rp.b), cast(&rp.c));
                let p = ScanProblem { batch: 2, len, channels: d, state: n, x: &x, delta: &delta, a: &a, b: &b, c: &c };
                let want = scan_sequential(&p, false, Lanes::Serial)?.y;
                for got in [
                    scan_parallel(&p, false, Lanes::Serial, combine)?.y,
                    scan_chunked(&p, DEFAULT_CHUNK, false, Lanes::Serial, combine)?.y,
                    scan_chunked(&p, 5, false, Lanes::Threaded, combine)?.y,
                ] {
                    worst = worst.max(max_rel_diff(&got, &want, floor));
                }
            }
        }
    }
    Ok(worst)
}

/// Parallel and chunked schedules against the sequential recurrence over
/// the size grid, with 2 sequences per problem.
pub fn scan_equivalence(opts: &VerifyOptions, lengths: &[usize]) -> anyhow::Result<CheckResult> {
    let combine = if opts.corrupt_scan { Combine::SwappedOrder } else { Combine::Affine };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let start = Instant::now();
    let (worst, tol) = match opts.precision {
        Precision::F64 => (scan_grid_max::<f64>(&mut rng, lengths, combine, |v| v.to_vec(), SCAN_FLOOR_F64)?, SCAN_TOL_F64),
        Precision::F32 => (
            scan_grid_max::<f32>(&mut rng, lengths, combine, |v| v.iter().map(|&x| x as f32).collect(), SCAN_FLOOR_F32)?,
            SCAN_TOL_F32,
        ),
    };
    let detail = format!("max rel err {worst:.3e} (tol {tol:.0e}) in {:.2}s", start.elapsed().as_secs_f64());
    Ok(CheckResult::new("scan_equivalence", worst <= tol, detail))
}

/// Closed-form scalar cases, the `a = 1, Δ = ln 2` pin and continuity of
/// the series branch at its threshold.
pub fn zoh_pins() -> anyhow::Result<CheckResult> {
    let mut worst = 0.0f64;
    let rel = |got: f64, want: f64| (got - want).abs() / want.abs().max(1e-300);
    for &(a, b, dt) in &[(1.0, 1.0, std::f64::consts::LN_2), (-1.0, 2.0, 0.5), (-3.5, -0.25, 0.01), (-0.2, 1.5, 2.0), (2.0, 1.0, 0.25)] {
        let (ab, bb) = discretize_zoh(a, b, dt);
        let z: f64 = a * dt;
        worst = worst.max(rel(ab, z.exp())).max(rel(bb, (z.exp() - 1.0) / a * b));
    }
    let (ab, bb) = discretize_zoh(1.0, 0.75, std::f64::consts::LN_2);
    let pin = (ab - 2.0).abs() <= 1e-12 && (bb - 0.75).abs() <= 1e-12 * 0.75;

    // Both sides of |Δa| = 1e-6 against each other.
    let mut jump = 0.0f64;
    for sign in [1.0, -1.0] {
        let below = zoh(sign * (1.0 - 1e-9) * 1e-6, 1.0, 1.0).1;
        let above = zoh(sign * (1.0 + 1e-9) * 1e-6, 1.0, 1.0).1;
        jump = jump.max(rel(below, above));
    }
    let pass = worst <= 1e-12 && pin && jump <= 1e-10;
    Ok(CheckResult::new("zoh", pass, format!("closed-form rel err {worst:.2e}, pin {pin}, branch jump {jump:.2e}")))
}

pub fn tiny_gradcheck_config() -> DenoiserConfig {
    DenoiserConfig { n_blocks: 1, d_model: 8, d_state: 4, joints: 2, cond_dim: 8, seq_len: 6, n_labels: 2, scan_mode: ScanMode::Chunked }
}

/// Every parameter of a jittered tiny denoiser, batch 2, through the full
/// training loss.
pub fn tiny_model_gradcheck() -> anyhow::Result<GradCheckReport> {
    let cfg = tiny_gradcheck_config();
    let model = Denoiser::new(cfg.clone(), 1)?;
    let params = model.parameters();
    jitter_parameters(&params, 0.2, 2)?;
    // The toy generator needs 8 frames; keep the first seq_len.
    let data = toy_dataset_generate(3, 2, 8, cfg.joints, cfg.n_labels)?;
    let (data, stats) = normalize(&data)?;
    let x0 = stack_pairs(&data.iter().collect::<Vec<_>>())?.narrow(2, 0, cfg.seq_len)?;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x_t = x0.add(&Tensor::randn(x0.shape(), &mut rng).mul_scalar(0.5))?;
    let cond = CondBatch::new(vec![40, 700], vec![0, 1], vec![false, true])?;
    let skel = Skeleton::new(cfg.joints)?;
    // A target near the current prediction keeps the loss small relative to
    // its gradients, which is what limits finite-difference resolution.
    let pred0 = model.predict_x0(&x_t, &cond)?.detach();
    let target = pred0.add(&x0.sub(&pred0)?.mul_scalar(0.05))?;
    Ok(check(&params, DEFAULT_STEP, || {
        let pred = model.predict_x0(&x_t, &cond)?;
        Ok(loss_total(&target, &pred, &stats, &skel, &LossWeights::default())?.total)
    })?)
}

pub const GRAD_TOL: f64 = 1e-3;

pub fn gradients(opts: &VerifyOptions) -> anyhow::Result<CheckResult> {
    if opts.precision == Precision::F32 {
        return Ok(CheckResult { name: "gradients", status: Status::Skipped("precision".into()), detail: String::new() });
    }
    let start = Instant::now();
    let r = tiny_model_gradcheck()?;
    let worst = r.worst.as_ref().map(|m| format!(", worst {}[{}]", m.param, m.index)).unwrap_or_default();
    let detail = format!("{} entries, max rel err {:.3e}{worst} in {:.1}s", r.checked, r.max_rel_err, start.elapsed().as_secs_f64());
    Ok(CheckResult::new("gradients", r.passes(GRAD_TOL), detail))
}

pub fn schedules() -> anyhow::Result<CheckResult> {
    let mut notes = Vec::new();
    let mut pass = true;
    for steps in [100, 1000] {
        let s = cosine_schedule(steps, DEFAULT_OFFSET)?;
        let ab = &s.alpha_bar;
        let dec = ab.windows(2).all(|w| w[1] < w[0]);
        pass &= dec && ab[0] >= 0.999 && ab[steps] <= 1e-3;
        notes.push(format!("T={steps}: decreasing {dec}, first {:.6}, last {:.2e}", ab[0], ab[steps]));
    }
    Ok(CheckResult::new("schedules", pass, notes.join("; ")))
}

/// Every loss term at `x̂0 = x0` over `count` random toy pairs.
pub fn loss_fixed_points(count: usize) -> anyhow::Result<CheckResult> {
    let _g = no_grad();
    let skel = Skeleton::new(5)?;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for seed in 0..count as u64 {
        let pair = toy_dataset_generate(1000 + seed, 1, 32, 5, 3)?;
        let x0 = stack_pairs(&[&pair[0]])?;
        let stats = if seed % 2 == 0 { NormStats::identity(x0.dim(3)) } else { normalize(&pair)?.1 };
        let x0 = stats.normalize(&x0)?;
        let l = loss_total(&x0, &x0, &stats, &skel, &LossWeights::default())?;
        for (_, v) in l.values() {
            worst = worst.max(v.abs());
        }
        checked += 1;
    }
    Ok(CheckResult::new("loss_fixed_points", worst == 0.0, format!("{checked} pairs, largest term {worst:e}")))
}

/// Returns the same clean sequence for every query.
pub struct OracleDenoiser(pub Tensor);

impl X0Model for OracleDenoiser {
    fn predict_x0(&self, _x: &Tensor, _cond: &CondBatch) -> duet::Result<Tensor> {
        Ok(self.0.clone())
    }
}

/// One-step DDIM with the oracle returns `x0`; 50-step DDIM with a random
/// model is repeatable per seed and differs across seeds.
pub fn ddim_determinism() -> anyhow::Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let shape = [1, 2, 8, 12];
    let x0 = Tensor::randn(&shape, &mut rng);
    let cond = CondBatch::new(vec![0], vec![1], vec![false])?;
    let guidance = GuidanceConfig::default();
    let one = cosine_schedule(1000, DEFAULT_OFFSET)?.with_ddim_steps(1)?;
    let out = ddim_sample(&OracleDenoiser(x0.clone()), &cond, &shape, &one, &guidance, 5)?;
    let oracle_err = max_rel_diff(out.data(), x0.data(), 1.0);

    let cfg = DenoiserConfig { n_blocks: 1, d_model: 8, d_state: 4, joints: 2, cond_dim: 8, seq_len: 8, n_labels: 2, scan_mode: ScanMode::Chunked };
    let model = Denoiser::new(cfg, 3)?;
    jitter_parameters(&model.parameters(), 0.1, 4)?;
    let sched = cosine_schedule(1000, DEFAULT_OFFSET)?.with_ddim_steps(50)?;
    let shape = [1, 2, 8, model.config.pose_dim()];
    let cond = CondBatch::new(vec![0], vec![1], vec![false])?;
    let a = ddim_sample(&model, &cond, &shape, &sched, &guidance, 9)?;
    let b = ddim_sample(&model, &cond, &shape, &sched, &guidance, 9)?;
    let c = ddim_sample(&model, &cond, &shape, &sched, &guidance, 10)?;
    let repeat = a.data() == b.data();
    let differs = a.data() != c.data();
    let pass = oracle_err <= 1e-9 && repeat && differs;
    Ok(CheckResult::new(
        "ddim_determinism",
        pass,
        format!("oracle one-step err {oracle_err:.2e}, same seed identical {repeat}, new seed differs {differs}"),
    ))
}

/// Empirical mean and variance of `forward_noise` on unit-variance inputs
/// against `√ᾱ·mean(x0)` and `ᾱ·var(x0) + 1 − ᾱ` at three steps.
pub fn forward_noise_moments(samples: usize) -> anyhow::Result<CheckResult> {
    let sched = cosine_schedule(1000, DEFAULT_OFFSET)?;
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let n = samples as f64;
    let moments = |d: &[f64]| {
        let m = d.iter().sum::<f64>() / n;
        (m, d.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0))
    };
    let mut worst = 0.0f64;
    let mut mean_dev = 0.0f64;
    for t in [10, 500, 990] {
        let x0 = Tensor::randn(&[samples], &mut rng);
        let eps = Tensor::randn(&[samples], &mut rng);
        let y = forward_noise(&x0, t, &eps, &sched)?;
        let ab = sched.alpha_bar[t];
        // Conditioned on the drawn x0, so only the noise is random.
        let (m0, v0) = moments(x0.data());
        let (mean, var) = moments(y.data());
        let want = ab * v0 + 1.0 - ab;
        worst = worst.max((var - want).abs() / want);
        // Standard error of the mean is sqrt((1 − ᾱ)/n); allow 5 of them.
        mean_dev = mean_dev.max((mean - ab.sqrt() * m0).abs() / ((1.0 - ab) / n).sqrt());
    }
    let pass = worst <= 0.02 && mean_dev <= 5.0;
    Ok(CheckResult::new(
        "forward_noise_moments",
        pass,
        format!("{samples} samples, variance rel err {worst:.4}, mean off by {mean_dev:.2} standard errors"),
    ))
}

/// `mssm(x, x)` against a sequential selective scan on `x`, and the tied
/// cross block against the self block with `h_inter = LN(h)`.
pub fn reductions(instances: usize) -> anyhow::Result<CheckResult> {
    let _g = no_grad();
    let mut mssm_err = 0.0f64;
    let mut block_err = 0.0f64;
    for i in 0..instances as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + i);
        let (d, l) = (4 + i as usize % 3, 5 + i as usize % 4);
        let core = SsmCore::new(&ParamFactory::new(i), d, 3, ScanMode::Chunked)?;
        jitter_parameters(&core.parameters(), 0.3, i)?;
        // Long enough to span several scan chunks.
        let x = Tensor::randn(&[2, 130 + l, d], &mut rng);
        let p = core.project(&x)?;
        let want = selective_scan(&x, &p.delta, &core.a(), &p.b, &p.c, ScanMode::Sequential)?;
        mssm_err = mssm_err.max(max_rel_diff(core.mssm(&x, &x)?.data(), want.data(), 1.0));

        let cfg = DenoiserConfig { d_model: d, d_state: 3, seq_len: l, cond_dim: 4, ..tiny_gradcheck_config() };
        let blk = SelfAstmBlock::new(&ParamFactory::new(200 + i), &cfg)?;
        jitter_parameters(&blk.parameters(), 0.3, 300 + i)?;
        blk.astm.temporal.set_identity_front();
        blk.astm.spatial.set_identity_front();
        let cross = CrossAstmBlock::new(&ParamFactory::new(400 + i), &cfg)?;
        cross.tie_to(&blk);
        let h = Tensor::randn(&[2, l, d], &mut rng);
        let h_inter = blk.norm.forward(&h)?;
        let got = cross.forward(&h, &h_inter)?;
        block_err = block_err.max(max_rel_diff(got.data(), blk.forward(&h)?.data(), 1.0));
    }
    let pass = mssm_err <= 1e-12 && block_err <= 1e-12;
    Ok(CheckResult::new(
        "reductions",
        pass,
        format!("{instances} instances, mssm err {mssm_err:.2e}, tied cross block err {block_err:.2e}"),
    ))
}

/// The `verify` command's suite at desk sizes.
pub fn run(opts: &VerifyOptions) -> anyhow::Result<Vec<CheckResult>> {
    Ok(vec![
        scan_equivalence(opts, &SCAN_LENGTHS)?,
        zoh_pins()?,
        gradients(opts)?,
        schedules()?,
        loss_fixed_points(100)?,
        ddim_determinism()?,
        forward_noise_moments(100_000)?,
        reductions(10)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corrupted_operator_fails_equivalence() {
        let opts = VerifyOptions { corrupt_scan: true, ..Default::default() };
        let r = scan_equivalence(&opts, &[7, 64]).unwrap();
        assert_eq!(r.status, Status::Fail, "{r}");
        assert!(scan_equivalence(&VerifyOptions::default(), &[7, 64]).unwrap().passed());
    }

    #[test]
    fn f32_skips_gradients() {
        let r = gradients(&VerifyOptions { precision: Precision::F32, ..Default::default() }).unwrap();
        assert_eq!(r.status, Status::Skipped("precision".into()));
        assert!(r.to_string().contains("skipped: precision"));
    }

    #[test]
    fn cheap_checks_pass() {
        for r in [zoh_pins().unwrap(), schedules().unwrap(), loss_fixed_points(4).unwrap(), reductions(2).unwrap()] {
            assert!(r.passed(), "{r}");
        }
    }
}
