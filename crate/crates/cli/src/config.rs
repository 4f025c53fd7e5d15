//! Run configuration: a TOML file, dotted-key overrides and an output root.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use duet::blocks::DenoiserConfig;
use duet::diffusion::{cosine_schedule, GuidanceConfig, NoiseSchedule, DEFAULT_DDIM_STEPS, DEFAULT_OFFSET, DEFAULT_STEPS};
use duet::motion::{DataConfig, LossWeights};
use duet::optim::AdamWConfig;

/// Relative output directories are resolved against this directory.
pub const OUTPUT_ROOT_ENV: &str = "DUET_OUTPUT_ROOT";

/// A bad invocation: unknown key, unknown label, malformed argument.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub ddim_steps: usize,
    pub offset: f64,
    pub eta: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: DEFAULT_STEPS, ddim_steps: DEFAULT_DDIM_STEPS, offset: DEFAULT_OFFSET, eta: 0.0 }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> duet::Result<NoiseSchedule> {
        let mut s = cosine_schedule(self.steps, self.offset)?.with_ddim_steps(self.ddim_steps)?;
        s.eta = self.eta;
        s.validate()?;
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Checkpoints are written every this many epochs and at the end.
    pub checkpoint_every: usize,
    /// Rows per sequence in each batch, each with its own step and noise.
    pub draws_per_sequence: usize,
    pub lr_schedule: LrSchedule,
    /// Global gradient-norm limit; 0 disables clipping.
    pub grad_clip: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from `lr` to 0 over all optimizer steps.
    Cosine,
}

impl LrSchedule {
    pub fn factor(self, step: u64, total: u64) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total.max(1) as f64).cos()),
        }
    }
}

impl Default for OptimConfig {
    fn default() -> Self {
        let a = AdamWConfig::default();
        Self {
            lr: a.lr,
            weight_decay: a.weight_decay,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            batch_size: 4,
            epochs: 100,
            checkpoint_every: 10,
            draws_per_sequence: 1,
            lr_schedule: LrSchedule::Constant,
            grad_clip: 0.0,
        }
    }
}

impl OptimConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, weight_decay: self.weight_decay, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds model initialization and every training draw.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub guidance: GuidanceConfig,
    pub optim: OptimConfig,
    pub data: DataConfig,
    pub loss: LossWeights,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            model: DenoiserConfig::default(),
            schedule: ScheduleConfig::default(),
            guidance: GuidanceConfig::default(),
            optim: OptimConfig::default(),
            data: DataConfig::default(),
            loss: LossWeights::default(),
        }
    }
}

/// Names accepted by `--preset`.
pub const PRESETS: [&str; 2] = ["default", "overfit"];

impl RunConfig {
    /// Built-in starting points.
    pub fn preset(name: &str) -> anyhow::Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            // One-block model memorizing the 8-sequence toy set.
            "overfit" => {
                let mut c = Self { output_dir: PathBuf::from("runs/overfit"), ..Self::default() };
                c.model.n_blocks = 1;
                c.optim.lr = 4e-3;
                c.optim.batch_size = 2;
                c.optim.draws_per_sequence = 16;
                c.optim.lr_schedule = LrSchedule::Cosine;
                c.optim.grad_clip = 1.0;
                c.optim.epochs = 200;
                c.optim.checkpoint_every = 50;
                // Guidance above 1 pushes samples off the memorized sequences.
                c.guidance.weight = 1.0;
                Ok(c)
            }
            other => Err(usage(format!("unknown preset {other:?}; known presets: {}", PRESETS.join(", ")))),
        }
    }

    /// Preset (or defaults), then the file, then each `key=value` override.
    pub fn load(preset: Option<&str>, file: Option<&Path>, overrides: &[String]) -> anyhow::Result<Self> {
        let base = Self::preset(preset.unwrap_or("default"))?;
        let mut table = toml::Table::try_from(&base).context("serializing base config")?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            let file_table: toml::Table = toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
            merge(&mut table, file_table, "")?;
        }
        for ov in overrides {
            apply_override(&mut table, ov)?;
        }
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| usage(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.model.validate()?;
        self.schedule.build()?;
        self.guidance.validate()?;
        self.optim.adamw().validate()?;
        let (m, d) = (&self.model, &self.data);
        if m.seq_len != d.frames || m.joints != d.joints || m.n_labels != d.n_labels {
            bail!(usage(format!(
                "model (seq_len {}, joints {}, n_labels {}) does not match data (frames {}, joints {}, n_labels {})",
                m.seq_len, m.joints, m.n_labels, d.frames, d.joints, d.n_labels
            )));
        }
        if !(self.optim.grad_clip >= 0.0) {
            bail!(usage("optim.grad_clip must be non-negative"));
        }
        if self.optim.batch_size == 0 || self.optim.checkpoint_every == 0 || self.optim.draws_per_sequence == 0 {
            bail!(usage("optim.batch_size, optim.draws_per_sequence and optim.checkpoint_every must be at least 1"));
        }
        Ok(())
    }

    /// `output_dir`, joined onto the output root when relative.
    pub fn resolved_output_dir(&self) -> PathBuf {
        resolve_output(&self.output_dir)
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Everything that must agree between an interrupted run and its resumption.
    pub fn resume_fingerprint(&self) -> serde_json::Value {
        let mut c = self.clone();
        c.optim.epochs = 0;
        c.optim.checkpoint_every = 1;
        c.output_dir = PathBuf::new();
        serde_json::to_value(c).expect("config serializes")
    }
}

pub fn resolve_output(path: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

fn merge(dst: &mut toml::Table, src: toml::Table, prefix: &str) -> anyhow::Result<()> {
    for (k, v) in src {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match (dst.get_mut(&k), v) {
            (Some(toml::Value::Table(d)), toml::Value::Table(s)) => merge(d, s, &key)?,
            (Some(slot), v) => *slot = coerce(slot, v),
            (None, _) => bail!(usage(format!("unknown config key {key}"))),
        }
    }
    Ok(())
}

/// Integers written where a float is expected are widened.
fn coerce(existing: &toml::Value, v: toml::Value) -> toml::Value {
    match (existing, v) {
        (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(i as f64),
        (_, v) => v,
    }
}

/// Applies `a.b.c=value`. The value is parsed as a TOML literal, falling
/// back to a bare string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> anyhow::Result<()> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| usage(format!("override {spec:?} is not key=value")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (leaf, path) = parts.split_last().expect("split yields one part");
    let mut cur = table;
    for p in path {
        cur = match cur.get_mut(*p) {
            Some(toml::Value::Table(t)) => t,
            _ => bail!(usage(format!("unknown config key {key}"))),
        };
    }
    match cur.get_mut(*leaf) {
        Some(slot) if !slot.is_table() => {
            *slot = coerce(slot, value);
            Ok(())
        }
        _ => Err(usage(format!("unknown config key {key}"))),
    }
}
