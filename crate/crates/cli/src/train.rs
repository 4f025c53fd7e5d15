//! Training loop with atomic checkpoints, exact resume and a JSONL metrics log.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use duet::blocks::{CondBatch, Denoiser, X0Model};
use duet::checkpoint::{atomic_write, model_checkpoint, Dtype, TensorFile};
use duet::diffusion::forward_noise_rows;
use duet::motion::{loss_total, normalize, stack_pairs, toy_dataset, MotionPair, NormStats, Skeleton};
use duet::optim::{grad_norm, AdamW, Moments};
use duet::{Module, Tensor};

use crate::config::{usage, RunConfig};

pub const MODEL_FILE: &str = "model.ckpt";
pub const STATE_FILE: &str = "train_state.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_ECHO: &str = "config.toml";

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    /// Optimizer steps completed at the end of the epoch.
    pub step: u64,
    pub term: String,
    pub value: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub output_dir: PathBuf,
    pub epochs_run: usize,
    pub steps: u64,
    /// Per-term means of the final epoch.
    pub last_epoch: BTreeMap<String, f64>,
}

impl TrainOutcome {
    pub fn model_path(&self) -> PathBuf {
        self.output_dir.join(MODEL_FILE)
    }
}

/// Normalized training tensor `[N, 2, L, P]` with labels and statistics.
pub struct TrainingSet {
    pub pairs: Vec<MotionPair>,
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub stats: NormStats,
}

pub fn training_set(cfg: &RunConfig) -> anyhow::Result<TrainingSet> {
    let raw = toy_dataset(&cfg.data)?;
    let (norm, stats) = normalize(&raw)?;
    let x = stack_pairs(&norm.iter().collect::<Vec<_>>())?;
    let labels = raw.iter().map(|p| p.label).collect();
    Ok(TrainingSet { pairs: raw, x, labels, stats })
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

fn save_state(path: &Path, cfg: &RunConfig, model: &Denoiser, opt: &AdamW, stats: &NormStats, next_epoch: usize) -> anyhow::Result<()> {
    let meta = json!({ "epoch": next_epoch, "step": opt.step, "config": cfg.resume_fingerprint() });
    let mut f = TensorFile::new("train_state", Dtype::F64, model.config.clone(), stats.clone(), meta);
    f.push_module("", model);
    for m in opt.moments() {
        f.push(format!("adam.m.{}", m.name), &[m.m.len()], m.m.clone());
        f.push(format!("adam.v.{}", m.name), &[m.v.len()], m.v.clone());
    }
    f.write(path)?;
    Ok(())
}

/// Restores weights and optimizer; returns the next epoch.
fn load_state(path: &Path, cfg: &RunConfig, model: &Denoiser, opt: &mut AdamW) -> anyhow::Result<usize> {
    let f = TensorFile::read(path).with_context(|| format!("reading {}", path.display()))?;
    if f.header.kind != "train_state" {
        bail!("{} is not a training state file", path.display());
    }
    if f.header.meta["config"] != cfg.resume_fingerprint() {
        bail!(usage("resume config differs from the interrupted run in more than epochs or checkpoint interval"));
    }
    f.load_module("", model)?;
    let moments = opt
        .moments()
        .iter()
        .map(|m| {
            let get = |kind: &str| {
                f.get(&format!("adam.{kind}.{}", m.name))
                    .map(|(_, v)| v.to_vec())
                    .ok_or_else(|| anyhow!("state lacks optimizer entry for {}", m.name))
            };
            Ok(Moments { name: m.name.clone(), m: get("m")?, v: get("v")? })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let step = f.header.meta["step"].as_u64().ok_or_else(|| anyhow!("state lacks step"))?;
    opt.restore(step, moments)?;
    f.header.meta["epoch"].as_u64().map(|e| e as usize).ok_or_else(|| anyhow!("state lacks epoch"))
}

/// Keeps rows of epochs before `epoch`, dropping anything logged after the
/// last checkpoint.
fn truncate_metrics(path: &Path, epoch: usize) -> anyhow::Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let mut kept = String::new();
    for line in BufReader::new(fs::File::open(path)?).lines() {
        let line = line?;
        let row: MetricRow = serde_json::from_str(&line).with_context(|| format!("malformed metrics row {line:?}"))?;
        if row.epoch < epoch {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    atomic_write(path, kept.as_bytes())?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> anyhow::Result<Vec<MetricRow>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines().map(|l| Ok(serde_json::from_str(l)?)).collect()
}

pub fn train(cfg: &RunConfig, resume: bool) -> anyhow::Result<TrainOutcome> {
    cfg.validate()?;
    let out = cfg.resolved_output_dir();
    fs::create_dir_all(&out).with_context(|| format!("cannot create output directory {}", out.display()))?;
    atomic_write(&out.join(CONFIG_ECHO), cfg.to_toml()?.as_bytes())
        .with_context(|| format!("output directory {} is not writable", out.display()))?;

    let set = training_set(cfg)?;
    let sched = cfg.schedule.build()?;
    let skel = Skeleton::new(cfg.data.joints)?;
    let model = Denoiser::new(cfg.model.clone(), cfg.seed)?;
    let params = model.parameters();
    let mut opt = AdamW::new(cfg.optim.adamw(), &params)?;
    let (state_path, model_path, metrics_path) = (out.join(STATE_FILE), out.join(MODEL_FILE), out.join(METRICS_FILE));

    let start = if resume {
        let e = load_state(&state_path, cfg, &model, &mut opt)?;
        truncate_metrics(&metrics_path, e)?;
        log::info!("resuming at epoch {e}, step {}", opt.step);
        e
    } else {
        if metrics_path.exists() {
            fs::remove_file(&metrics_path)?;
        }
        0
    };

    let n = set.labels.len();
    let total_steps = (cfg.optim.epochs * n.div_ceil(cfg.optim.batch_size)) as u64;
    let base_lr = cfg.optim.lr;
    let mut last_epoch = BTreeMap::new();
    for epoch in start..cfg.optim.epochs {
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut sums: BTreeMap<&'static str, f64> = BTreeMap::new();
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.optim.batch_size) {
            let idx: Vec<usize> = chunk.iter().flat_map(|&i| std::iter::repeat_n(i, cfg.optim.draws_per_sequence)).collect();
            let idx = &idx[..];
            let x0 = set.x.select(0, idx)?;
            let t: Vec<usize> = idx.iter().map(|_| rng.random_range(1..=sched.steps)).collect();
            let drop: Vec<bool> = idx.iter().map(|_| rng.random::<f64>() < cfg.guidance.drop_prob).collect();
            let eps = Tensor::randn(x0.shape(), &mut rng);
            let x_t = forward_noise_rows(&x0, &t, &eps, &sched)?;
            let skip = t.iter().map(|&t| sched.alpha_bar(t).map(f64::sqrt)).collect::<Result<Vec<_>, _>>()?;
            let cond = CondBatch::new(t, idx.iter().map(|&i| set.labels[i]).collect(), drop)?.with_skips(skip)?;

            model.zero_grad();
            let pred = model.predict_x0(&x_t, &cond)?;
            let loss = loss_total(&x0, &pred, &set.stats, &skel, &cfg.loss)?;
            let total = loss.total.item()?;
            if !total.is_finite() {
                bail!(duet::Error::NonFinite(format!(
                    "loss at epoch {epoch}, step {}; last good checkpoint kept in {}",
                    opt.step + 1,
                    out.display()
                )));
            }
            loss.total.backward()?;
            let norm = grad_norm(&params);
            let scale = if cfg.optim.grad_clip > 0.0 && norm > cfg.optim.grad_clip { cfg.optim.grad_clip / norm } else { 1.0 };
            opt.config.lr = base_lr * cfg.optim.lr_schedule.factor(opt.step, total_steps);
            opt.update_scaled(&params, scale)?;
            for (term, v) in loss.values() {
                *sums.entry(term).or_default() += v;
            }
            batches += 1;
        }

        last_epoch = sums.iter().map(|(k, v)| (k.to_string(), v / batches as f64)).collect();
        let mut rows: Vec<MetricRow> =
            last_epoch.iter().map(|(term, &value)| MetricRow { epoch, step: opt.step, term: term.clone(), value }).collect();
        rows.extend(model.fusion_scalars().into_iter().map(|(term, value)| MetricRow { epoch, step: opt.step, term, value }));
        append_rows(&metrics_path, &rows)?;
        log::info!("epoch {epoch}: total {:.5}, diff {:.5}", last_epoch["total"], last_epoch["diff"]);

        let done = epoch + 1;
        if done % cfg.optim.checkpoint_every == 0 || done == cfg.optim.epochs {
            save_state(&state_path, cfg, &model, &opt, &set.stats, done)?;
            let meta = json!({
                "epoch": done,
                "step": opt.step,
                "schedule": cfg.schedule,
                "guidance": cfg.guidance,
            });
            model_checkpoint(&model, &set.stats, meta).write(&model_path)?;
        }
    }
    Ok(TrainOutcome { output_dir: out, epochs_run: cfg.optim.epochs.saturating_sub(start), steps: opt.step, last_epoch })
}

fn append_rows(path: &Path, rows: &[MetricRow]) -> anyhow::Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    let mut buf = String::new();
    for r in rows {
        buf.push_str(&serde_json::to_string(r)?);
        buf.push('\n');
    }
    f.write_all(buf.as_bytes())?;
    f.flush()?;
    Ok(())
}
