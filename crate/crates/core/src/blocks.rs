//! Self/cross blocks, the pairwise aggregation between them, and the full
//! two-person denoiser.

use serde::{Deserialize, Serialize};

use crate::astm::{AstmCrossUnit, AstmUnit};
use crate::error::{Error, Result};
use crate::kernels::ScanMode;
use crate::nn::{AdaLn, Conv1d, LayerNorm, Linear};
use crate::param::{Init, Module, ParamFactory, Parameter};
use crate::tensor::Tensor;

/// `h + out(ASTM(LN h) ⊙ SiLU(gate(LN h)))`, zero-initialized output so a
/// fresh block is the identity.
#[derive(Debug)]
pub struct SelfAstmBlock {
    pub norm: LayerNorm,
    pub astm: AstmUnit,
    pub gate: Linear,
    pub out: Linear,
}

impl SelfAstmBlock {
    pub fn new(f: &ParamFactory, cfg: &DenoiserConfig) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            norm: LayerNorm::new(&f.pp("norm"), d)?,
            astm: AstmUnit::new(&f.pp("astm"), d, cfg.seq_len, cfg.d_state, cfg.scan_mode)?,
            gate: Linear::new(&f.pp("gate"), d, d)?,
            out: Linear::zeros(&f.pp("out"), d, d)?,
        })
    }

    pub fn forward(&self, h: &Tensor) -> Result<Tensor> {
        let hn = self.norm.forward(h)?;
        let mixed = self.astm.forward(&hn)?;
        let q = self.gate.forward(&hn)?.silu();
        h.add(&self.out.forward(&mixed.mul(&q)?)?)
    }
}

impl Module for SelfAstmBlock {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.norm.visit_params(f);
        self.astm.visit_params(f);
        self.gate.visit_params(f);
        self.out.visit_params(f);
    }
}

/// The self block skeleton around the cross unit.
#[derive(Debug)]
pub struct CrossAstmBlock {
    pub norm: LayerNorm,
    pub astm: AstmCrossUnit,
    pub gate: Linear,
    pub out: Linear,
}

impl CrossAstmBlock {
    pub fn new(f: &ParamFactory, cfg: &DenoiserConfig) -> Result<Self> {
        let d = cfg.d_model;
        Ok(Self {
            norm: LayerNorm::new(&f.pp("norm"), d)?,
            astm: AstmCrossUnit::new(&f.pp("astm"), d, cfg.seq_len, cfg.d_state, cfg.scan_mode)?,
            gate: Linear::new(&f.pp("gate"), d, d)?,
            out: Linear::zeros(&f.pp("out"), d, d)?,
        })
    }

    pub fn forward(&self, h: &Tensor, h_inter: &Tensor) -> Result<Tensor> {
        let hn = self.norm.forward(h)?;
        let mixed = self.astm.forward(&hn, h_inter)?;
        let q = self.gate.forward(&hn)?.silu();
        h.add(&self.out.forward(&mixed.mul(&q)?)?)
    }

    /// Copies all weights from a self block.
    pub fn tie_to(&self, blk: &SelfAstmBlock) {
        self.astm.tie_to(&blk.astm);
        for (dst, src) in [(&self.norm.gamma, &blk.norm.gamma), (&self.norm.beta, &blk.norm.beta)] {
            dst.set_data(src.to_vec()).expect("same shape");
        }
        for (dst, src) in [(&self.gate, &blk.gate), (&self.out, &blk.out)] {
            for (d, s) in dst.parameters().into_iter().zip(src.parameters()) {
                d.set_data(s.to_vec()).expect("same shape");
            }
        }
    }
}

impl Module for CrossAstmBlock {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.norm.visit_params(f);
        self.astm.visit_params(f);
        self.gate.visit_params(f);
        self.out.visit_params(f);
    }
}

/// Pairwise aggregation: `c1 = conv1(AdaLN([h_a, h_b], cond))`,
/// `h_inter = c1 + conv3(c1)`.
#[derive(Debug)]
pub struct Liia {
    pub ada: AdaLn,
    pub conv1: Conv1d,
    pub conv3: Conv1d,
}

impl Liia {
    pub fn new(f: &ParamFactory, d: usize, cond_dim: usize) -> Result<Self> {
        Ok(Self {
            ada: AdaLn::new(&f.pp("ada"), cond_dim, 2 * d)?,
            conv1: Conv1d::new(&f.pp("conv1"), 2 * d, d, 1)?,
            conv3: Conv1d::new(&f.pp("conv3"), d, d, 3)?,
        })
    }

    pub fn forward(&self, h_a: &Tensor, h_b: &Tensor, cond: &Tensor) -> Result<Tensor> {
        if h_a.shape() != h_b.shape() {
            return Err(Error::shape("liia", h_a.shape(), h_b.shape()));
        }
        let hab = self.ada.forward(&Tensor::concat(&[h_a, h_b], 2)?, cond)?;
        let c1 = self.conv1.forward(&hab)?;
        c1.add(&self.conv3.forward(&c1)?)
    }
}

impl Module for Liia {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.ada.visit_params(f);
        self.conv1.visit_params(f);
        self.conv3.visit_params(f);
    }
}

/// Self blocks on both persons, aggregation, then cross blocks on both.
#[derive(Debug)]
pub struct InterBlock {
    pub self_blk: SelfAstmBlock,
    pub liia: Liia,
    pub cross_blk: CrossAstmBlock,
}

impl InterBlock {
    pub fn new(f: &ParamFactory, cfg: &DenoiserConfig) -> Result<Self> {
        Ok(Self {
            self_blk: SelfAstmBlock::new(&f.pp("self_astm"), cfg)?,
            liia: Liia::new(&f.pp("liia"), cfg.d_model, cfg.cond_dim)?,
            cross_blk: CrossAstmBlock::new(&f.pp("cross_astm"), cfg)?,
        })
    }

    /// `h` stacks person a then person b along the batch axis: `[2·Bt, L, D]`.
    pub fn forward(&self, h: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let bt = h.dim(0) / 2;
        let hs = self.self_blk.forward(h)?;
        let inter = self.liia.forward(&hs.narrow(0, 0, bt)?, &hs.narrow(0, bt, bt)?, cond)?;
        self.cross_blk.forward(&hs, &Tensor::concat(&[&inter, &inter], 0)?)
    }
}

impl Module for InterBlock {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.self_blk.visit_params(f);
        self.liia.visit_params(f);
        self.cross_blk.visit_params(f);
    }
}

/// Per-frame pose width for `joints` joints: positions, velocities, 6-D
/// rotations and four contact flags.
pub fn pose_dim(joints: usize) -> usize {
    12 * joints + 4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub n_blocks: usize,
    pub d_model: usize,
    pub d_state: usize,
    pub joints: usize,
    pub cond_dim: usize,
    /// The spatial branch scans the feature axis with the frame axis as
    /// channels, so the model is built for one sequence length.
    pub seq_len: usize,
    pub n_labels: usize,
    pub scan_mode: ScanMode,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            n_blocks: 2,
            d_model: 64,
            d_state: 16,
            joints: 5,
            cond_dim: 64,
            seq_len: 32,
            n_labels: 3,
            scan_mode: ScanMode::Chunked,
        }
    }
}

impl DenoiserConfig {
    pub fn pose_dim(&self) -> usize {
        pose_dim(self.joints)
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("n_blocks", self.n_blocks),
            ("d_model", self.d_model),
            ("d_state", self.d_state),
            ("joints", self.joints),
            ("cond_dim", self.cond_dim),
            ("seq_len", self.seq_len),
            ("n_labels", self.n_labels),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// Sinusoidal embedding of integer steps, `[len(t), dim]`.
pub fn timestep_embedding(t: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; t.len() * dim];
    for (row, &step) in out.chunks_exact_mut(dim).zip(t) {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
            let arg = step as f64 * freq;
            row[i] = arg.cos();
            row[half + i] = arg.sin();
        }
    }
    Tensor::from_vec(out, &[t.len(), dim]).expect("sized above")
}

/// Sinusoidal frame-index embedding, `[1, len, dim]`.
pub fn frame_embedding(len: usize, dim: usize) -> Tensor {
    let idx: Vec<usize> = (0..len).collect();
    timestep_embedding(&idx, dim).reshape(&[1, len, dim]).expect("same element count")
}

/// Condition inputs for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct CondBatch {
    pub t: Vec<usize>,
    pub labels: Vec<usize>,
    /// Rows whose label embedding is replaced by zeros.
    pub drop: Vec<bool>,
    /// Per-row coefficient on `x_t` added to the prediction; empty means none.
    pub skip: Vec<f64>,
}

impl CondBatch {
    pub fn new(t: Vec<usize>, labels: Vec<usize>, drop: Vec<bool>) -> Result<Self> {
        if t.len() != labels.len() || t.len() != drop.len() {
            return Err(Error::Data(format!(
                "condition rows disagree: {} steps, {} labels, {} drop flags",
                t.len(),
                labels.len(),
                drop.len()
            )));
        }
        Ok(Self { t, labels, drop, skip: Vec::new() })
    }

    /// Sets per-row skip coefficients, usually `√ᾱ_t`.
    pub fn with_skips(mut self, skip: Vec<f64>) -> Result<Self> {
        if !skip.is_empty() && skip.len() != self.len() {
            return Err(Error::Data(format!("{} skip coefficients for {} condition rows", skip.len(), self.len())));
        }
        self.skip = skip;
        Ok(self)
    }

    pub fn with_skip(&self, skip: f64) -> Self {
        Self { skip: vec![skip; self.len()], ..self.clone() }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn with_step(&self, t: usize) -> Self {
        Self { t: vec![t; self.len()], ..self.clone() }
    }

    pub fn with_drop(&self, drop: bool) -> Self {
        Self { drop: vec![drop; self.len()], ..self.clone() }
    }
}

/// Anything that predicts clean pose pairs `[Bt, 2, L, P]` from noisy ones.
pub trait X0Model {
    fn predict_x0(&self, x_t: &Tensor, cond: &CondBatch) -> Result<Tensor>;
}

/// Adds `skip[i]·x_t[i]` to each row of a network output.
pub fn add_skip(out: Tensor, x_t: &Tensor, cond: &CondBatch) -> Result<Tensor> {
    if cond.skip.is_empty() {
        return Ok(out);
    }
    let mut s = vec![1; x_t.rank()];
    s[0] = cond.skip.len();
    out.add(&x_t.mul(&Tensor::from_vec(cond.skip.clone(), &s)?)?)
}

/// Splits `[Bt, 2, L, P]` into two `[Bt, L, P]` tensors.
pub fn split_pair(x: &Tensor) -> Result<(Tensor, Tensor)> {
    match x.shape() {
        &[bt, 2, l, p] => Ok((x.narrow(1, 0, 1)?.reshape(&[bt, l, p])?, x.narrow(1, 1, 1)?.reshape(&[bt, l, p])?)),
        s => Err(Error::Data(format!("expected a pose pair [batch, 2, frames, width], got {s:?}"))),
    }
}

/// Inverse of [`split_pair`].
pub fn join_pair(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() || a.rank() != 3 {
        return Err(Error::Data(format!("person sequences differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let s = [a.dim(0), 1, a.dim(1), a.dim(2)];
    Tensor::concat(&[&a.reshape(&s)?, &b.reshape(&s)?], 1)
}

/// Timestep and label conditioning shared by both denoisers.
#[derive(Debug)]
pub struct CondEncoder {
    pub label_table: Parameter,
    pub time1: Linear,
    pub time2: Linear,
}

impl CondEncoder {
    pub fn new(f: &ParamFactory, n_labels: usize, cond_dim: usize) -> Result<Self> {
        Ok(Self {
            label_table: f.param("label_table", &[n_labels, cond_dim], Init::Uniform(-1.0, 1.0))?,
            time1: Linear::new(&f.pp("time1"), cond_dim, cond_dim)?,
            time2: Linear::new(&f.pp("time2"), cond_dim, cond_dim)?,
        })
    }

    pub fn n_labels(&self) -> usize {
        self.label_table.shape()[0]
    }

    /// `[Bt, cond_dim]`
    pub fn forward(&self, cond: &CondBatch) -> Result<Tensor> {
        let n = self.n_labels();
        if let Some(&bad) = cond.labels.iter().find(|&&l| l >= n) {
            return Err(Error::Index { op: "label embedding", index: bad, len: n });
        }
        let dim = self.label_table.shape()[1];
        let keep: Vec<f64> = cond.drop.iter().map(|&d| if d { 0.0 } else { 1.0 }).collect();
        let keep = Tensor::from_vec(keep, &[cond.len(), 1])?;
        let labels = self.label_table.tensor().select(0, &cond.labels)?.mul(&keep)?;
        let temb = timestep_embedding(&cond.t, dim);
        let time = self.time2.forward(&self.time1.forward(&temb)?.silu())?;
        labels.add(&time)
    }
}

impl Module for CondEncoder {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        f(&self.label_table);
        self.time1.visit_params(f);
        self.time2.visit_params(f);
    }
}

#[derive(Debug)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub input_proj: Linear,
    pub cond: CondEncoder,
    pub cond_proj: Linear,
    pub blocks: Vec<InterBlock>,
    pub final_norm: LayerNorm,
    pub head: Linear,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let f = ParamFactory::new(seed);
        let (d, p, dc) = (config.d_model, config.pose_dim(), config.cond_dim);
        let blocks = (0..config.n_blocks)
            .map(|i| InterBlock::new(&f.pp(&format!("block{i}")), &config))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            input_proj: Linear::new(&f.pp("input_proj"), p, d)?,
            cond: CondEncoder::new(&f.pp("cond"), config.n_labels, dc)?,
            cond_proj: Linear::new(&f.pp("cond_proj"), dc, d)?,
            blocks,
            final_norm: LayerNorm::new(&f.pp("final_norm"), d)?,
            head: Linear::zeros(&f.pp("head"), d, p)?,
            config,
        })
    }

    /// Predicts `(x̂0_a, x̂0_b)` from two noisy `[Bt, L, P]` sequences.
    pub fn forward(&self, x_a: &Tensor, x_b: &Tensor, cond: &CondBatch) -> Result<(Tensor, Tensor)> {
        if x_a.shape() != x_b.shape() {
            return Err(Error::Data(format!("person sequences differ: {:?} vs {:?}", x_a.shape(), x_b.shape())));
        }
        let (p, l) = (self.config.pose_dim(), self.config.seq_len);
        if x_a.rank() != 3 || x_a.dim(1) != l || x_a.dim(2) != p {
            return Err(Error::shape("denoiser input", x_a.shape(), &[x_a.dim(0), l, p]));
        }
        let bt = x_a.dim(0);
        if cond.len() != bt {
            return Err(Error::Data(format!("{} condition rows for a batch of {bt}", cond.len())));
        }
        let c = self.cond.forward(cond)?;
        let c_emb = self.cond_proj.forward(&c)?.reshape(&[bt, 1, self.config.d_model])?;
        let c_emb = Tensor::concat(&[&c_emb, &c_emb], 0)?;
        let mut h = self.input_proj.forward(&Tensor::concat(&[x_a, x_b], 0)?)?.add(&c_emb)?;
        for blk in &self.blocks {
            h = blk.forward(&h, &c)?;
        }
        let out = self.head.forward(&self.final_norm.forward(&h)?)?;
        Ok((out.narrow(0, 0, bt)?, out.narrow(0, bt, bt)?))
    }

    /// Learnable fusion scalars per block, by name.
    pub fn fusion_scalars(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        for (i, blk) in self.blocks.iter().enumerate() {
            let u = &blk.self_blk.astm;
            let c = &blk.cross_blk.astm;
            for (name, p) in [("w_alpha", &u.w_alpha), ("w_beta", &u.w_beta), ("alpha_c", &c.alpha_c), ("beta_c", &c.beta_c)] {
                out.push((format!("block{i}.{name}"), p.to_vec()[0]));
            }
        }
        out
    }
}

impl X0Model for Denoiser {
    fn predict_x0(&self, x_t: &Tensor, cond: &CondBatch) -> Result<Tensor> {
        let (a, b) = split_pair(x_t)?;
        let (xa, xb) = self.forward(&a, &b, cond)?;
        add_skip(join_pair(&xa, &xb)?, x_t, cond)
    }
}

impl Module for Denoiser {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.input_proj.visit_params(f);
        self.cond.visit_params(f);
        self.cond_proj.visit_params(f);
        for b in &self.blocks {
            b.visit_params(f);
        }
        self.final_norm.visit_params(f);
        self.head.visit_params(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{conv1d, layer_norm};
    use crate::tensor::no_grad;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashSet;

    fn tiny() -> DenoiserConfig {
        DenoiserConfig { n_blocks: 1, d_model: 8, d_state: 4, joints: 2, cond_dim: 6, seq_len: 6, n_labels: 3, scan_mode: ScanMode::Chunked }
    }

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn randomize(m: &dyn Module, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in m.parameters() {
            p.set_data(Tensor::rand_uniform(&p.shape(), -0.5, 0.5, &mut rng).to_vec()).unwrap();
        }
    }

    fn cond(bt: usize) -> CondBatch {
        CondBatch::new(vec![10; bt], (0..bt).map(|i| i % 3).collect(), vec![false; bt]).unwrap()
    }

    #[test]
    fn self_block_residual_identity_at_init() {
        let cfg = tiny();
        let blk = SelfAstmBlock::new(&ParamFactory::new(0), &cfg).unwrap();
        let h = randn(&[2, 6, 8], 1);
        assert_eq!(blk.forward(&h).unwrap().data(), h.data());
        let z = Tensor::zeros(&[2, 6, 8]);
        assert!(blk.forward(&z).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn self_block_matches_stagewise_oracle() {
        let cfg = tiny();
        let blk = SelfAstmBlock::new(&ParamFactory::new(2), &cfg).unwrap();
        randomize(&blk, 3);
        let h = randn(&[2, 6, 8], 4);
        let hbar = layer_norm(&h, Some(&blk.norm.gamma.tensor()), Some(&blk.norm.beta.tensor()), blk.norm.eps).unwrap();
        let hhat = blk.astm.forward(&hbar).unwrap();
        let q = blk.gate.forward(&hbar).unwrap().silu();
        let want = h.add(&blk.out.forward(&hhat.mul(&q).unwrap()).unwrap()).unwrap();
        assert_eq!(blk.forward(&h).unwrap().data(), want.data());
    }

    #[test]
    fn cross_block_residual_identity_at_init() {
        let blk = CrossAstmBlock::new(&ParamFactory::new(5), &tiny()).unwrap();
        let h = randn(&[2, 6, 8], 6);
        let inter = randn(&[2, 6, 8], 7);
        assert_eq!(blk.forward(&h, &inter).unwrap().data(), h.data());
    }

    #[test]
    fn liia_zero_and_residual_paths() {
        let (d, dc) = (3, 2);
        let liia = Liia::new(&ParamFactory::new(8), d, dc).unwrap();
        let ha = randn(&[1, 5, d], 9);
        let hb = randn(&[1, 5, d], 10);
        let c = randn(&[1, dc], 11);

        for p in [&liia.conv1.weight, &liia.conv1.bias, &liia.conv3.weight, &liia.conv3.bias] {
            p.fill(0.0);
        }
        assert!(liia.forward(&ha, &hb, &c).unwrap().data().iter().all(|&v| v == 0.0));

        let mut first = vec![0.0; d * 2 * d];
        (0..d).for_each(|i| first[i * 2 * d + i] = 1.0);
        liia.conv1.weight.set_data(first).unwrap();
        let normed = liia.ada.forward(&Tensor::concat(&[&ha, &hb], 2).unwrap(), &c).unwrap();
        let want = normed.narrow(2, 0, d).unwrap();
        assert_eq!(liia.forward(&ha, &hb, &c).unwrap().data(), want.data());
        assert!(liia.forward(&ha, &randn(&[1, 4, d], 0), &c).is_err());
    }

    #[test]
    fn liia_matches_direct_convolution() {
        let (d, dc, l) = (2, 2, 4);
        let liia = Liia::new(&ParamFactory::new(12), d, dc).unwrap();
        randomize(&liia, 13);
        let ha = randn(&[1, l, d], 14);
        let hb = randn(&[1, l, d], 15);
        let c = randn(&[1, dc], 16);
        let hab = liia.ada.forward(&Tensor::concat(&[&ha, &hb], 2).unwrap(), &c).unwrap();

        // hand convolution with explicit zero padding
        let w1 = liia.conv1.weight.to_vec();
        let b1 = liia.conv1.bias.to_vec();
        let w3 = liia.conv3.weight.to_vec();
        let b3 = liia.conv3.bias.to_vec();
        let x = hab.data();
        let mut c1 = vec![0.0; l * d];
        for t in 0..l {
            for o in 0..d {
                c1[t * d + o] = b1[o] + (0..2 * d).map(|i| w1[o * 2 * d + i] * x[t * 2 * d + i]).sum::<f64>();
            }
        }
        let mut want = c1.clone();
        for t in 0..l {
            for o in 0..d {
                let mut acc = b3[o];
                for j in 0..3 {
                    let s = t as isize + j as isize - 1;
                    if (0..l as isize).contains(&s) {
                        acc += (0..d).map(|i| w3[o * d * 3 + i * 3 + j] * c1[s as usize * d + i]).sum::<f64>();
                    }
                }
                want[t * d + o] += acc;
            }
        }
        let got = liia.forward(&ha, &hb, &c).unwrap();
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
        // sanity: library conv agrees with the hand loop on the first stage
        let lib_c1 = conv1d(&hab, &liia.conv1.weight.tensor(), Some(&liia.conv1.bias.tensor())).unwrap();
        for (g, w) in lib_c1.data().iter().zip(&c1) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_head_predicts_zero() {
        let m = Denoiser::new(tiny(), 17).unwrap();
        let x = randn(&[2, 2, 6, 28], 18);
        let y = m.predict_x0(&x, &cond(2)).unwrap();
        assert_eq!(y.shape(), &[2, 2, 6, 28]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn parameter_names_are_unique_and_shared_across_persons() {
        let m = Denoiser::new(DenoiserConfig { n_blocks: 2, ..tiny() }, 0).unwrap();
        let names: Vec<String> = m.parameters().iter().map(|p| p.name().to_string()).collect();
        let set: HashSet<&String> = names.iter().collect();
        assert_eq!(set.len(), names.len());
        assert!(names.iter().all(|n| !n.contains("person")));
        assert!(names.iter().any(|n| n == "block1.cross_astm.astm.spatial.ssm.log_a"));
    }

    #[test]
    fn forward_is_deterministic_and_person_order_sensitive() {
        let m = Denoiser::new(tiny(), 19).unwrap();
        randomize(&m, 20);
        let _g = no_grad();
        let xa = randn(&[1, 6, 28], 21);
        let xb = randn(&[1, 6, 28], 22);
        let (ya, yb) = m.forward(&xa, &xb, &cond(1)).unwrap();
        let (ya2, _) = m.forward(&xa, &xb, &cond(1)).unwrap();
        assert_eq!(ya.data(), ya2.data());
        // concatenation order makes the swap asymmetric
        let (sb, sa) = m.forward(&xb, &xa, &cond(1)).unwrap();
        let diff = sa.sub(&ya).unwrap().square().sum_all().item().unwrap() + sb.sub(&yb).unwrap().square().sum_all().item().unwrap();
        assert!(diff > 1e-12);
    }

    #[test]
    fn dropped_condition_ignores_label() {
        let m = Denoiser::new(tiny(), 23).unwrap();
        randomize(&m, 24);
        let _g = no_grad();
        let x = randn(&[1, 2, 6, 28], 25);
        let a = CondBatch::new(vec![5], vec![0], vec![true]).unwrap();
        let b = CondBatch::new(vec![5], vec![2], vec![true]).unwrap();
        assert_eq!(m.predict_x0(&x, &a).unwrap().data(), m.predict_x0(&x, &b).unwrap().data());
        let c = CondBatch::new(vec![5], vec![2], vec![false]).unwrap();
        assert_ne!(m.predict_x0(&x, &a).unwrap().data(), m.predict_x0(&x, &c).unwrap().data());
    }

    #[test]
    fn skip_adds_scaled_input_per_row() {
        let m = Denoiser::new(tiny(), 26).unwrap();
        randomize(&m, 27);
        let _g = no_grad();
        let x = randn(&[2, 2, 6, 28], 28);
        let plain = cond(2);
        let base = m.predict_x0(&x, &plain).unwrap();
        let got = m.predict_x0(&x, &plain.clone().with_skips(vec![0.25, -2.0]).unwrap()).unwrap();
        let half = x.numel() / 2;
        for (i, ((g, b), xv)) in got.data().iter().zip(base.data()).zip(x.data()).enumerate() {
            let s = if i < half { 0.25 } else { -2.0 };
            assert!((g - b - s * xv).abs() < 1e-12);
        }
        assert!(plain.with_skips(vec![1.0; 3]).is_err());
    }

    #[test]
    fn frame_embedding_rows_are_step_embeddings() {
        let e = frame_embedding(5, 6);
        assert_eq!(e.shape(), &[1, 5, 6]);
        assert_eq!(e.data(), timestep_embedding(&[0, 1, 2, 3, 4], 6).data());
    }

    #[test]
    fn input_validation() {
        let m = Denoiser::new(tiny(), 0).unwrap();
        let a = Tensor::zeros(&[1, 6, 28]);
        assert!(matches!(m.forward(&a, &Tensor::zeros(&[1, 5, 28]), &cond(1)), Err(Error::Data(_))));
        let bad = CondBatch::new(vec![1], vec![7], vec![false]).unwrap();
        assert!(matches!(m.forward(&a, &a, &bad), Err(Error::Index { .. })));
        assert!(Denoiser::new(DenoiserConfig { n_blocks: 0, ..tiny() }, 0).is_err());
    }

    #[test]
    fn timestep_embedding_values() {
        let e = timestep_embedding(&[0, 3], 4);
        assert_eq!(&e.data()[..4], &[1.0, 1.0, 0.0, 0.0]);
        let f1 = (-(10_000f64.ln()) / 2.0).exp();
        assert!((e.data()[5] - (3.0 * f1).cos()).abs() < 1e-15);
        assert!((e.data()[6] - 3f64.sin()).abs() < 1e-15);
    }
}
