//! Adam with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::Parameter;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, weight_decay: 2e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

/// First and second moments of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub name: String,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    moments: Vec<Moments>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &[&Parameter]) -> Result<Self> {
        config.validate()?;
        let moments = params
            .iter()
            .map(|p| Moments { name: p.name().to_string(), m: vec![0.0; p.numel()], v: vec![0.0; p.numel()] })
            .collect();
        Ok(Self { config, step: 0, moments })
    }

    /// Applies one update from the gradients currently held by `params`,
    /// which must be in construction order. Parameters without a gradient
    /// are left untouched.
    pub fn update(&mut self, params: &[&Parameter]) -> Result<()> {
        self.update_scaled(params, 1.0)
    }

    /// [`AdamW::update`] with every gradient multiplied by `scale` first.
    pub fn update_scaled(&mut self, params: &[&Parameter], scale: f64) -> Result<()> {
        if params.len() != self.moments.len() {
            return Err(Error::Data(format!("optimizer tracks {} parameters, got {}", self.moments.len(), params.len())));
        }
        self.step += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (p, st) in params.iter().zip(&mut self.moments) {
            if p.name() != st.name {
                return Err(Error::Data(format!("optimizer expected {}, got {}", st.name, p.name())));
            }
            let Some(mut g) = p.grad() else { continue };
            if scale != 1.0 {
                g.iter_mut().for_each(|v| *v *= scale);
            }
            let mut w = p.to_vec();
            for i in 0..w.len() {
                st.m[i] = c.beta1 * st.m[i] + (1.0 - c.beta1) * g[i];
                st.v[i] = c.beta2 * st.v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = st.m[i] / bc1;
                let v_hat = st.v[i] / bc2;
                w[i] -= c.lr * (m_hat / (v_hat.sqrt() + c.eps) + c.weight_decay * w[i]);
            }
            p.set_data(w)?;
        }
        Ok(())
    }

    pub fn moments(&self) -> &[Moments] {
        &self.moments
    }

    /// Replaces the moments and step count, checking names and sizes.
    pub fn restore(&mut self, step: u64, moments: Vec<Moments>) -> Result<()> {
        if moments.len() != self.moments.len() {
            return Err(Error::Format(format!("saved optimizer has {} entries, expected {}", moments.len(), self.moments.len())));
        }
        for (a, b) in self.moments.iter().zip(&moments) {
            if a.name != b.name || a.m.len() != b.m.len() || a.v.len() != b.v.len() {
                return Err(Error::Format(format!("saved optimizer entry {} does not match {}", b.name, a.name)));
            }
        }
        self.step = step;
        self.moments = moments;
        Ok(())
    }
}

/// Joint L2 norm of all present gradients.
pub fn grad_norm(params: &[&Parameter]) -> f64 {
    params.iter().filter_map(|p| p.grad()).flatten().map(|g| g * g).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let p = Parameter::new("w", vec![1.0, -2.0], &[2]).unwrap();
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.0, ..AdamWConfig::default() };
        let mut opt = AdamW::new(cfg, &[&p]).unwrap();
        p.tensor().mul(&Tensor::from_vec(vec![3.0, -0.5], &[2]).unwrap()).unwrap().sum_all().backward().unwrap();
        opt.update(&[&p]).unwrap();
        // Bias-corrected first step is lr·sign(g) up to eps.
        let w = p.to_vec();
        assert!((w[0] - 0.9).abs() < 1e-7 && (w[1] - -1.9).abs() < 1e-7, "{w:?}");
    }

    #[test]
    fn decay_is_decoupled_from_gradient() {
        let p = Parameter::new("w", vec![2.0], &[1]).unwrap();
        let cfg = AdamWConfig { lr: 0.5, weight_decay: 0.1, ..AdamWConfig::default() };
        let mut opt = AdamW::new(cfg, &[&p]).unwrap();
        p.tensor().mul_scalar(0.0).sum_all().backward().unwrap();
        opt.update(&[&p]).unwrap();
        assert!((p.to_vec()[0] - (2.0 - 0.5 * 0.1 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let p = Parameter::new("w", vec![3.0, -1.0, 0.5], &[3]).unwrap();
        let cfg = AdamWConfig { lr: 0.05, weight_decay: 0.0, ..AdamWConfig::default() };
        let mut opt = AdamW::new(cfg, &[&p]).unwrap();
        for _ in 0..500 {
            p.zero_grad();
            p.tensor().add_scalar(-1.0).square().sum_all().backward().unwrap();
            opt.update(&[&p]).unwrap();
        }
        assert!(p.to_vec().iter().all(|w| (w - 1.0).abs() < 1e-2), "{:?}", p.to_vec());
    }

    #[test]
    fn scaled_update_matches_scaled_gradient() {
        let run = |k: f64, scale: f64| {
            let p = Parameter::new("w", vec![1.0, 2.0], &[2]).unwrap();
            let cfg = AdamWConfig { lr: 0.1, ..AdamWConfig::default() };
            let mut opt = AdamW::new(cfg, &[&p]).unwrap();
            for _ in 0..3 {
                p.zero_grad();
                p.tensor().square().sum_all().mul_scalar(k).backward().unwrap();
                opt.update_scaled(&[&p], scale).unwrap();
            }
            p.to_vec()
        };
        assert_eq!(run(0.25, 1.0), run(1.0, 0.25));
        let p = Parameter::new("w", vec![3.0, 4.0], &[2]).unwrap();
        p.tensor().square().sum_all().mul_scalar(0.5).backward().unwrap();
        assert_eq!(grad_norm(&[&p]), 5.0);
    }

    #[test]
    fn restore_checks_layout() {
        let p = Parameter::new("w", vec![0.0; 2], &[2]).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), &[&p]).unwrap();
        let bad = vec![Moments { name: "x".into(), m: vec![0.0; 2], v: vec![0.0; 2] }];
        assert!(opt.restore(3, bad).is_err());
        let good = vec![Moments { name: "w".into(), m: vec![1.0; 2], v: vec![2.0; 2] }];
        opt.restore(3, good.clone()).unwrap();
        assert_eq!((opt.step, opt.moments()), (3, &good[..]));
    }
}
