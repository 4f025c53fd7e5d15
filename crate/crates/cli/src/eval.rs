//! Sample quality against the training set, for the overfit experiment.

use std::path::Path;

use anyhow::bail;
use serde::Serialize;

use duet::blocks::{Denoiser, X0Model};
use duet::motion::MotionPair;

use crate::config::{usage, RunConfig};
use crate::sample::{draw, Sampler};
use crate::train::training_set;

pub const DEFAULT_MSE_RATIO: f64 = 0.2;
pub const DEFAULT_SAMPLES: usize = 4;

/// Mean squared joint-position error over both persons and all frames.
pub fn position_mse(a: &MotionPair, b: &MotionPair) -> f64 {
    let pos = a.layout().positions();
    let mut sum = 0.0;
    let mut n = 0usize;
    for p in 0..2 {
        for t in 0..a.frames {
            for (x, y) in a.frame(p, t)[pos.clone()].iter().zip(&b.frame(p, t)[pos.clone()]) {
                sum += (x - y) * (x - y);
                n += 1;
            }
        }
    }
    sum / n as f64
}

/// Smallest [`position_mse`] to a training pair with the same label.
pub fn nearest_same_label(sample: &MotionPair, train: &[MotionPair]) -> Option<f64> {
    train.iter().filter(|p| p.label == sample.label).map(|p| position_mse(sample, p)).min_by(f64::total_cmp)
}

#[derive(Clone, Debug, Serialize)]
pub struct LabelScore {
    pub label: usize,
    pub trained: f64,
    pub untrained: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct OverfitReport {
    pub labels: Vec<LabelScore>,
    pub trained: f64,
    pub untrained: f64,
}

impl OverfitReport {
    pub fn ratio(&self) -> f64 {
        self.trained / self.untrained
    }
}

fn score(model: &dyn X0Model, cfg: &RunConfig, ckpt: &Sampler, train: &[MotionPair], label: usize, seed: u64) -> anyhow::Result<f64> {
    let s = draw(model, &cfg.model, &ckpt.file.header.norm_stats, &ckpt.schedule, &cfg.guidance, label, seed)?;
    nearest_same_label(&s, train).ok_or_else(|| anyhow::anyhow!("no training sequence has label {label}"))
}

/// Per label, the mean nearest-neighbour position MSE of `samples` draws from
/// the checkpoint and of as many from the same config at initialization.
/// Guidance comes from `cfg`, the schedule from the checkpoint.
pub fn overfit_report(cfg: &RunConfig, ckpt: &Path, seed: u64, samples: usize) -> anyhow::Result<OverfitReport> {
    if samples == 0 {
        bail!(usage("need at least one sample per label"));
    }
    let set = training_set(cfg)?;
    let sampler = Sampler::load(ckpt)?;
    if sampler.file.header.norm_stats != set.stats {
        bail!("checkpoint was trained on different data");
    }
    let fresh = Denoiser::new(cfg.model.clone(), cfg.seed)?;
    let mut labels = Vec::new();
    for label in 0..cfg.model.n_labels {
        let (mut trained, mut untrained) = (0.0, 0.0);
        for k in 0..samples {
            let s = seed + (label * samples + k) as u64;
            trained += score(&sampler.model, cfg, &sampler, &set.pairs, label, s)? / samples as f64;
            untrained += score(&fresh, cfg, &sampler, &set.pairs, label, s)? / samples as f64;
        }
        labels.push(LabelScore { label, trained, untrained });
    }
    let n = labels.len() as f64;
    let trained = labels.iter().map(|l| l.trained).sum::<f64>() / n;
    let untrained = labels.iter().map(|l| l.untrained).sum::<f64>() / n;
    Ok(OverfitReport { labels, trained, untrained })
}
