//! Guided DDIM sampling from a saved model.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::Context;

use duet::blocks::{CondBatch, Denoiser, DenoiserConfig, X0Model};
use duet::checkpoint::{load_model, TensorFile};
use duet::diffusion::{ddim_sample, GuidanceConfig, NoiseSchedule};
use duet::motion::{unstack_pairs, write_motion, write_tsv, MotionPair, NormStats, DEFAULT_FPS};

use crate::config::{usage, ScheduleConfig};

pub struct Sampler {
    pub model: Denoiser,
    pub file: TensorFile,
    pub schedule: NoiseSchedule,
    pub guidance: GuidanceConfig,
}

impl Sampler {
    /// Loads weights plus the schedule and guidance the model was trained with.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let (model, file) = load_model(path).with_context(|| format!("loading {}", path.display()))?;
        let meta = &file.header.meta;
        let sched_cfg: ScheduleConfig = match meta.get("schedule") {
            Some(v) => serde_json::from_value(v.clone()).context("checkpoint schedule")?,
            None => ScheduleConfig::default(),
        };
        let guidance: GuidanceConfig = match meta.get("guidance") {
            Some(v) => serde_json::from_value(v.clone()).context("checkpoint guidance")?,
            None => GuidanceConfig::default(),
        };
        Ok(Self { schedule: sched_cfg.build()?, guidance, model, file })
    }

    pub fn n_labels(&self) -> usize {
        self.model.config.n_labels
    }

    pub fn check_label(&self, label: usize) -> anyhow::Result<()> {
        if label >= self.n_labels() {
            let known: Vec<String> = (0..self.n_labels()).map(|l| l.to_string()).collect();
            return Err(usage(format!("unknown label {label}; known labels: {}", known.join(", "))));
        }
        Ok(())
    }

    /// Sample in data units.
    pub fn sample(&self, label: usize, seed: u64) -> anyhow::Result<MotionPair> {
        self.check_label(label)?;
        let h = &self.file.header;
        draw(&self.model, &self.model.config, &h.norm_stats, &self.schedule, &self.guidance, label, seed)
    }
}

/// One guided DDIM sample from any denoiser, mapped back to data units.
pub fn draw(
    model: &dyn X0Model,
    config: &DenoiserConfig,
    stats: &NormStats,
    schedule: &NoiseSchedule,
    guidance: &GuidanceConfig,
    label: usize,
    seed: u64,
) -> anyhow::Result<MotionPair> {
    let cond = CondBatch::new(vec![0], vec![label], vec![false])?;
    let shape = [1, 2, config.seq_len, config.pose_dim()];
    let x = stats.denormalize(&ddim_sample(model, &cond, &shape, schedule, guidance, seed)?)?;
    Ok(unstack_pairs(&x, config.joints, &[label], DEFAULT_FPS)?.remove(0))
}

pub struct Written {
    pub motion: PathBuf,
    pub tsv: PathBuf,
    pub elapsed: Duration,
}

pub fn sample_file_stem(label: usize, seed: u64, index: usize) -> String {
    format!("sample_l{label}_s{seed}_{index:03}")
}

/// Writes `count` samples; sample `i` uses seed `seed + i`.
pub fn run(ckpt: &Path, label: usize, seed: u64, count: usize, out: &Path) -> anyhow::Result<Vec<Written>> {
    let sampler = Sampler::load(ckpt)?;
    sampler.check_label(label)?;
    if count == 0 {
        return Ok(Vec::new());
    }
    fs::create_dir_all(out).with_context(|| format!("cannot create output directory {}", out.display()))?;
    let id = sampler.file.header.norm_stats.id();
    let mut written = Vec::with_capacity(count);
    for i in 0..count {
        let start = Instant::now();
        let pair = sampler.sample(label, seed + i as u64)?;
        let stem = sample_file_stem(label, seed, i);
        let (motion, tsv) = (out.join(format!("{stem}.imm")), out.join(format!("{stem}.tsv")));
        write_motion(&motion, &pair, &id)?;
        write_tsv(&tsv, &pair)?;
        written.push(Written { motion, tsv, elapsed: start.elapsed() });
    }
    Ok(written)
}
