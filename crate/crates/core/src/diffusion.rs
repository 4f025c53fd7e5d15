//! Cosine noise schedule, forward noising, x₀-prediction loss and
//! deterministic DDIM sampling with classifier-free guidance.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{CondBatch, X0Model};
use crate::error::{Error, Result};
use crate::tensor::{no_grad, Tensor};

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_DDIM_STEPS: usize = 50;
pub const DEFAULT_OFFSET: f64 = 0.008;
/// Lower bound of ᾱ.
pub const ALPHA_BAR_FLOOR: f64 = 1e-5;
/// Clamp applied to every x̂0 prediction during sampling.
pub const X0_CLAMP: f64 = 6.0;

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub steps: usize,
    /// `ᾱ[0..=T]`
    pub alpha_bar: Vec<f64>,
    /// Strictly increasing, ends at `T`.
    pub ddim_steps: Vec<usize>,
    pub eta: f64,
}

/// `f(t)/f(0)` with `f(t) = cos²(((t/T + s)/(1 + s))·π/2)`, unfloored.
pub fn cosine_alpha_bar(t: usize, steps: usize, s: f64) -> f64 {
    let f = |t: f64| (((t / steps as f64 + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2).cos().powi(2);
    f(t as f64) / f(0.0)
}

/// Cosine schedule over `steps` diffusion steps. The floor is applied as
/// `ᾱ = floor + (1 − floor)·f(t)/f(0)` so that ᾱ stays strictly decreasing
/// near `T`, where a hard clip would flatten the last few entries.
pub fn cosine_schedule(steps: usize, s: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::Config(format!("schedule needs at least 2 steps, got {steps}")));
    }
    let alpha_bar = (0..=steps)
        .map(|t| ALPHA_BAR_FLOOR + (1.0 - ALPHA_BAR_FLOOR) * cosine_alpha_bar(t, steps, s))
        .collect();
    Ok(NoiseSchedule {
        steps,
        alpha_bar,
        ddim_steps: ddim_steps(steps, DEFAULT_DDIM_STEPS.min(steps))?,
        eta: 0.0,
    })
}

/// Evenly spaced sub-schedule `k·T/S` for `k = 1..=S`.
pub fn ddim_steps(steps: usize, count: usize) -> Result<Vec<usize>> {
    if count == 0 || count > steps {
        return Err(Error::Config(format!("cannot take {count} sampling steps from a {steps}-step schedule")));
    }
    Ok((1..=count).map(|k| k * steps / count).collect())
}

impl NoiseSchedule {
    pub fn with_ddim_steps(mut self, count: usize) -> Result<Self> {
        self.ddim_steps = ddim_steps(self.steps, count)?;
        Ok(self)
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar.get(t).copied().ok_or(Error::Index { op: "noise schedule", index: t, len: self.alpha_bar.len() })
    }

    pub fn validate(&self) -> Result<()> {
        let ab = &self.alpha_bar;
        if ab.len() != self.steps + 1 || !ab.windows(2).all(|w| w[1] < w[0]) {
            return Err(Error::Config("ᾱ must have T+1 strictly decreasing entries".into()));
        }
        if !self.ddim_steps.windows(2).all(|w| w[0] < w[1]) || self.ddim_steps.last() != Some(&self.steps) || self.ddim_steps[0] == 0 {
            return Err(Error::Config("sampling steps must increase strictly and end at T".into()));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config(format!("eta must be in [0, 1], got {}", self.eta)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub weight: f64,
    pub drop_prob: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self { weight: 3.5, drop_prob: 0.1 }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.weight >= 0.0) {
            return Err(Error::Config(format!("guidance.weight must be ≥ 0, got {}", self.weight)));
        }
        if !(0.0..1.0).contains(&self.drop_prob) {
            return Err(Error::Config(format!("guidance.drop_prob must be in [0, 1), got {}", self.drop_prob)));
        }
        Ok(())
    }
}

/// `x_t = √ᾱ_t·x0 + √(1−ᾱ_t)·ε` with one step for the whole tensor.
pub fn forward_noise(x0: &Tensor, t: usize, eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    let ab = sched.alpha_bar(t)?;
    x0.mul_scalar(ab.sqrt()).add(&eps.mul_scalar((1.0 - ab).sqrt()))
}

/// Row-wise noising: `t[i]` applies to `x0[i, ...]`.
pub fn forward_noise_rows(x0: &Tensor, t: &[usize], eps: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    if x0.rank() == 0 || x0.dim(0) != t.len() || eps.shape() != x0.shape() {
        return Err(Error::shape("forward_noise", x0.shape(), eps.shape()));
    }
    let mut shape = vec![1; x0.rank()];
    shape[0] = t.len();
    let ab = t.iter().map(|&t| sched.alpha_bar(t)).collect::<Result<Vec<_>>>()?;
    let signal = Tensor::from_vec(ab.iter().map(|a| a.sqrt()).collect(), &shape)?;
    let noise = Tensor::from_vec(ab.iter().map(|a| (1.0 - a).sqrt()).collect(), &shape)?;
    x0.mul(&signal)?.add(&eps.mul(&noise)?)
}

/// Mean squared error over all elements.
pub fn loss_diff(x0: &Tensor, x0_hat: &Tensor) -> Result<Tensor> {
    if x0.shape() != x0_hat.shape() {
        return Err(Error::shape("loss_diff", x0.shape(), x0_hat.shape()));
    }
    Ok(x0_hat.sub(x0)?.square().mean_all())
}

/// `uncond + w·(cond − uncond)`
pub fn cfg_combine(pred_cond: &Tensor, pred_uncond: &Tensor, w: f64) -> Result<Tensor> {
    pred_uncond.add(&pred_cond.sub(pred_uncond)?.mul_scalar(w))
}

/// Deterministic (for η = 0) DDIM over `sched.ddim_steps`, starting from
/// seeded Gaussian noise of `shape`. `cond` supplies labels; its steps and
/// drop flags are overwritten per call, and its skip coefficient is `√ᾱ_t`.
pub fn ddim_sample(
    model: &dyn X0Model,
    cond: &CondBatch,
    shape: &[usize],
    sched: &NoiseSchedule,
    guidance: &GuidanceConfig,
    seed: u64,
) -> Result<Tensor> {
    sched.validate()?;
    let _g = no_grad();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Tensor::randn(shape, &mut rng);
    let (on, off) = (cond.with_drop(false), cond.with_drop(true));
    let taus = &sched.ddim_steps;
    for (k, i) in (0..taus.len()).rev().enumerate() {
        let t = taus[i];
        let t_prev = if i > 0 { taus[i - 1] } else { 0 };
        let skip = sched.alpha_bar(t)?.sqrt();
        let pc = model.predict_x0(&x, &on.with_step(t).with_skip(skip))?;
        let pred = if guidance.weight == 1.0 {
            pc
        } else {
            let pu = model.predict_x0(&x, &off.with_step(t).with_skip(skip))?;
            cfg_combine(&pc, &pu, guidance.weight)?
        };
        if pred.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("sampling step {k} (t = {t})")));
        }
        let x0_hat = pred.clamp(-X0_CLAMP, X0_CLAMP);
        let (ab, ab_prev) = (sched.alpha_bar(t)?, sched.alpha_bar(t_prev)?);
        let eps_hat = x.sub(&x0_hat.mul_scalar(ab.sqrt()))?.mul_scalar(1.0 / (1.0 - ab).sqrt());
        let sigma = sched.eta * ((1.0 - ab_prev) / (1.0 - ab)).sqrt() * (1.0 - ab / ab_prev).max(0.0).sqrt();
        let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
        x = x0_hat.mul_scalar(ab_prev.sqrt()).add(&eps_hat.mul_scalar(dir))?;
        if sigma > 0.0 {
            x = x.add(&Tensor::randn(shape, &mut rng).mul_scalar(sigma))?;
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Returns a fixed tensor regardless of input.
    struct Fixed(Tensor);

    impl X0Model for Fixed {
        fn predict_x0(&self, _x: &Tensor, _c: &CondBatch) -> Result<Tensor> {
            Ok(self.0.clone())
        }
    }

    fn cond() -> CondBatch {
        CondBatch::new(vec![0], vec![0], vec![false]).unwrap()
    }

    #[test]
    fn schedule_invariants_and_pin() {
        for steps in [100, 1000] {
            let s = cosine_schedule(steps, DEFAULT_OFFSET).unwrap();
            s.validate().unwrap();
            assert!(s.alpha_bar[0] >= 0.999 && s.alpha_bar[steps] <= 1e-3);
            assert!(s.alpha_bar.iter().all(|&a| a >= ALPHA_BAR_FLOOR));
        }
        assert_eq!(cosine_alpha_bar(0, 1000, DEFAULT_OFFSET), 1.0);
        // cos²((0.5 + 0.008)/1.008 · π/2) / cos²(0.008/1.008 · π/2)
        let num = (0.508f64 / 1.008 * std::f64::consts::FRAC_PI_2).cos().powi(2);
        let den = (0.008f64 / 1.008 * std::f64::consts::FRAC_PI_2).cos().powi(2);
        let s = cosine_schedule(1000, DEFAULT_OFFSET).unwrap();
        assert!((s.alpha_bar[500] - (1e-5 + (1.0 - 1e-5) * num / den)).abs() < 1e-15);
        assert!(cosine_schedule(1, DEFAULT_OFFSET).is_err());
    }

    #[test]
    fn ddim_substeps() {
        assert_eq!(ddim_steps(1000, 4).unwrap(), vec![250, 500, 750, 1000]);
        let s = ddim_steps(1000, 50).unwrap();
        assert_eq!((s[0], s.len(), *s.last().unwrap()), (20, 50, 1000));
        assert!(ddim_steps(10, 11).is_err());
    }

    #[test]
    fn forward_noise_examples() {
        let mut s = cosine_schedule(10, DEFAULT_OFFSET).unwrap();
        s.alpha_bar[3] = 0.25;
        let x = Tensor::full(&[1], 2.0);
        let e = Tensor::full(&[1], 1.0);
        let y = forward_noise(&x, 3, &e, &s).unwrap();
        assert!((y.data()[0] - (1.0 + 0.75f64.sqrt())).abs() < 1e-15);
        s.alpha_bar[0] = 1.0;
        assert_eq!(forward_noise(&x, 0, &e, &s).unwrap().data(), x.data());
        assert!(matches!(forward_noise(&x, 11, &e, &s), Err(Error::Index { .. })));
    }

    #[test]
    fn loss_and_guidance_arithmetic() {
        let z = Tensor::zeros(&[2]);
        let o = Tensor::ones(&[2]);
        assert_eq!(loss_diff(&z, &z).unwrap().item().unwrap(), 0.0);
        assert_eq!(loss_diff(&z, &o).unwrap().item().unwrap(), 1.0);
        assert_eq!(loss_diff(&z, &o.mul_scalar(2.0)).unwrap().item().unwrap(), 4.0);
        assert_eq!(cfg_combine(&o, &z, 3.5).unwrap().data(), &[3.5, 3.5]);
        assert_eq!(cfg_combine(&o, &z, 1.0).unwrap().data(), o.data());
        assert_eq!(cfg_combine(&o, &o, 7.0).unwrap().data(), o.data());
    }

    #[test]
    fn one_step_ddim_returns_prediction() {
        let target = Tensor::from_vec(vec![0.5, -1.25, 3.0, 0.0], &[1, 2, 1, 2]).unwrap();
        let sched = cosine_schedule(1000, DEFAULT_OFFSET).unwrap().with_ddim_steps(1).unwrap();
        let out = ddim_sample(&Fixed(target.clone()), &cond(), &[1, 2, 1, 2], &sched, &GuidanceConfig::default(), 3).unwrap();
        assert_eq!(out.data(), target.data());
    }

    /// Records each call's step, drop flag and skip coefficient.
    struct Recorder(std::cell::RefCell<Vec<(usize, bool, f64)>>);

    impl X0Model for Recorder {
        fn predict_x0(&self, x: &Tensor, c: &CondBatch) -> Result<Tensor> {
            self.0.borrow_mut().push((c.t[0], c.drop[0], c.skip[0]));
            Ok(x.mul_scalar(0.0))
        }
    }

    #[test]
    fn ddim_passes_root_alpha_bar_as_skip() {
        let sched = cosine_schedule(100, DEFAULT_OFFSET).unwrap().with_ddim_steps(4).unwrap();
        let rec = Recorder(Default::default());
        ddim_sample(&rec, &cond(), &[1, 2, 1, 2], &sched, &GuidanceConfig::default(), 0).unwrap();
        let calls = rec.0.into_inner();
        assert_eq!(calls.len(), 8);
        for (k, &(t, drop, skip)) in calls.iter().enumerate() {
            assert_eq!(drop, k % 2 == 1);
            assert_eq!(t, [100, 75, 50, 25][k / 2]);
            assert_eq!(skip, sched.alpha_bar[t].sqrt());
        }
    }

    #[test]
    fn ddim_is_seed_deterministic() {
        struct Shrink;
        impl X0Model for Shrink {
            fn predict_x0(&self, x: &Tensor, c: &CondBatch) -> Result<Tensor> {
                Ok(x.mul_scalar(0.5 + c.t[0] as f64 * 1e-4))
            }
        }
        let sched = cosine_schedule(100, DEFAULT_OFFSET).unwrap().with_ddim_steps(10).unwrap();
        let g = GuidanceConfig::default();
        let a = ddim_sample(&Shrink, &cond(), &[1, 2, 3, 2], &sched, &g, 9).unwrap();
        let b = ddim_sample(&Shrink, &cond(), &[1, 2, 3, 2], &sched, &g, 9).unwrap();
        let c = ddim_sample(&Shrink, &cond(), &[1, 2, 3, 2], &sched, &g, 10).unwrap();
        assert_eq!(a.data(), b.data());
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn non_finite_prediction_reports_step() {
        let bad = Tensor::from_vec(vec![f64::NAN], &[1, 1, 1, 1]).unwrap();
        let sched = cosine_schedule(100, DEFAULT_OFFSET).unwrap().with_ddim_steps(5).unwrap();
        let err = ddim_sample(&Fixed(bad), &cond(), &[1, 1, 1, 1], &sched, &GuidanceConfig::default(), 0).unwrap_err();
        assert!(err.to_string().contains("step 0"), "{err}");
    }

    #[test]
    fn guidance_validation() {
        assert!(GuidanceConfig { weight: -1.0, drop_prob: 0.1 }.validate().is_err());
        assert!(GuidanceConfig { weight: 1.0, drop_prob: 1.0 }.validate().is_err());
        GuidanceConfig::default().validate().unwrap();
    }
}
