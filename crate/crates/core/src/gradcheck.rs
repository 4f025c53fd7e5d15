//! Central finite-difference checks of recorded gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::param::Parameter;
use crate::tensor::{no_grad, Tensor};

pub const DEFAULT_STEP: f64 = 1e-5;
/// Floor of the relative-error denominator.
pub const DENOM_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Entry with the largest relative error.
    pub worst: Option<Mismatch>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Adds `U(−scale, scale)` noise to every parameter, so zero-initialized
/// layers do not mask the gradients flowing through them.
pub fn jitter_parameters(params: &[&Parameter], scale: f64, seed: u64) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in params {
        let v = p.to_vec().iter().map(|w| w + rng.random_range(-scale..scale)).collect();
        p.set_data(v)?;
    }
    Ok(())
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(DENOM_FLOOR)
}

/// Compares the backward gradient of `loss` with central differences for
/// every element of every parameter in `params`. `loss` must rebuild its
/// graph from the parameters' current values on each call.
pub fn check(params: &[&Parameter], h: f64, loss: impl Fn() -> Result<Tensor>) -> Result<GradCheckReport> {
    for p in params {
        p.zero_grad();
    }
    loss()?.backward()?;
    let analytic: Vec<Vec<f64>> = params.iter().map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()])).collect();

    let _guard = no_grad();
    let mut report = GradCheckReport::default();
    for (p, grad) in params.iter().zip(&analytic) {
        let base = p.to_vec();
        let mut probe = base.clone();
        for i in 0..base.len() {
            probe[i] = base[i] + h;
            p.set_data(probe.clone())?;
            let up = loss()?.item()?;
            probe[i] = base[i] - h;
            p.set_data(probe.clone())?;
            let down = loss()?.item()?;
            probe[i] = base[i];

            let numeric = (up - down) / (2.0 * h);
            let err = rel_err(grad[i], numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some(Mismatch { param: p.name().to_string(), index: i, analytic: grad[i], numeric, rel_err: err });
            }
        }
        p.set_data(base)?;
    }
    Ok(report)
}
