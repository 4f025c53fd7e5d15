//! Naive multi-head scaled dot-product attention and an equal-width
//! attention denoiser, used as the quadratic comparison target.
//!
//! No tiling or fused softmax: every head materializes its full `L×L`
//! score matrix.

use rayon::prelude::*;

use crate::blocks::{add_skip, frame_embedding, join_pair, split_pair, CondBatch, CondEncoder, DenoiserConfig, X0Model};
use crate::error::{Error, Result};
use crate::kernels::{gemm, Real};
use crate::nn::{AdaLn, LayerNorm, Linear};
use crate::param::{Module, ParamFactory, Parameter};
use crate::tensor::Tensor;

pub const DEFAULT_HEADS: usize = 4;
pub const FFN_MULT: usize = 4;

/// Shapes of one attention call: queries `[batch, lq, width]`, keys and
/// values `[batch, lk, width]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnDims {
    pub batch: usize,
    pub lq: usize,
    pub lk: usize,
    pub width: usize,
    pub heads: usize,
}

impl AttnDims {
    fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!("width {} is not divisible by {} heads", self.width, self.heads)));
        }
        Ok(())
    }
}

/// Row-wise softmax in place.
fn softmax_rows<T: Real>(s: &mut [T], cols: usize) {
    for row in s.chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        let inv = T::one() / sum;
        row.iter_mut().for_each(|v| *v = *v * inv);
    }
}

/// One `(batch, head)` pair: returns the head output `[lq, dh]` and its
/// probabilities `[lq, lk]`.
fn head_forward<T: Real>(q: &[T], k: &[T], v: &[T], dims: &AttnDims, b: usize, h: usize) -> (Vec<T>, Vec<T>) {
    let (lq, lk, d, dh) = (dims.lq, dims.lk, dims.width, dims.head_dim());
    let q0 = b * lq * d + h * dh;
    let k0 = b * lk * d + h * dh;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let mut probs = vec![T::zero(); lq * lk];
    gemm(lq, dh, lk, scale, (&q[q0..], d, 1), (&k[k0..], 1, d), T::zero(), (&mut probs, lk, 1));
    softmax_rows(&mut probs, lk);
    let mut out = vec![T::zero(); lq * dh];
    gemm(lq, lk, dh, T::one(), (&probs, lk, 1), (&v[k0..], d, 1), T::zero(), (&mut out, dh, 1));
    (out, probs)
}

/// `softmax(Q Kᵀ / √dh) V` per head over pre-projected inputs. Returns the
/// concatenated head outputs and, when `keep_probs`, every probability
/// matrix in `(batch, head)` order.
pub fn sdpa<T: Real>(q: &[T], k: &[T], v: &[T], dims: &AttnDims, keep_probs: bool, threaded: bool) -> Result<(Vec<T>, Vec<T>)> {
    dims.validate()?;
    let AttnDims { batch, lq, lk, width: d, heads } = *dims;
    if q.len() != batch * lq * d || k.len() != batch * lk * d || v.len() != k.len() {
        return Err(Error::Data(format!(
            "attention inputs have {}, {}, {} elements for {dims:?}",
            q.len(),
            k.len(),
            v.len()
        )));
    }
    let dh = dims.head_dim();
    let run = |i: usize| {
        let (o, p) = head_forward(q, k, v, dims, i / heads, i % heads);
        (o, if keep_probs { p } else { Vec::new() })
    };
    let parts: Vec<(Vec<T>, Vec<T>)> = if threaded {
        (0..batch * heads).into_par_iter().map(run).collect()
    } else {
        (0..batch * heads).map(run).collect()
    };
    let mut out = vec![T::zero(); batch * lq * d];
    let mut probs = Vec::with_capacity(if keep_probs { batch * heads * lq * lk } else { 0 });
    for (i, (o, p)) in parts.into_iter().enumerate() {
        let (b, h) = (i / heads, i % heads);
        for (t, row) in o.chunks_exact(dh).enumerate() {
            let at = (b * lq + t) * d + h * dh;
            out[at..at + dh].copy_from_slice(row);
        }
        probs.extend(p);
    }
    Ok((out, probs))
}

/// Differentiable multi-head attention over projected `q [B,Lq,D]`,
/// `k, v [B,Lk,D]`.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let (batch, lq, d) = match q.shape() {
        &[b, l, d] => (b, l, d),
        s => return Err(Error::shape("attention", s, &[0, 0, 0])),
    };
    if k.rank() != 3 || k.dim(0) != batch || k.dim(2) != d || k.shape() != v.shape() {
        return Err(Error::shape("attention", k.shape(), &[batch, k.dim(1), d]));
    }
    let dims = AttnDims { batch, lq, lk: k.dim(1), width: d, heads };
    let record = Tensor::should_record(&[q, k, v]);
    let (out, probs) = sdpa(q.data(), k.data(), v.data(), &dims, record, false)?;
    let (qs, ks, vs) = (q.clone(), k.clone(), v.clone());
    Ok(Tensor::from_op(
        "attention",
        out,
        vec![batch, lq, d],
        vec![q.clone(), k.clone(), v.clone()],
        Box::new(move |g| {
            let (gq, gk, gv) = sdpa_backward(qs.data(), ks.data(), vs.data(), &probs, g, &dims);
            vec![qs.requires_grad().then_some(gq), ks.requires_grad().then_some(gk), vs.requires_grad().then_some(gv)]
        }),
    ))
}

fn sdpa_backward(q: &[f64], k: &[f64], v: &[f64], probs: &[f64], g: &[f64], dims: &AttnDims) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let AttnDims { batch, lq, lk, width: d, heads } = *dims;
    let dh = dims.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let (mut gq, mut gk, mut gv) = (vec![0.0; q.len()], vec![0.0; k.len()], vec![0.0; v.len()]);
    let mut dp = vec![0.0; lq * lk];
    for b in 0..batch {
        for h in 0..heads {
            let p = &probs[(b * heads + h) * lq * lk..][..lq * lk];
            let (q0, k0) = (b * lq * d + h * dh, b * lk * d + h * dh);
            // dV = Pᵀ dO
            gemm(lk, lq, dh, 1.0, (p, 1, lk), (&g[q0..], d, 1), 0.0, (&mut gv[k0..], d, 1));
            // dP = dO Vᵀ, then through the softmax.
            gemm(lq, dh, lk, 1.0, (&g[q0..], d, 1), (&v[k0..], 1, d), 0.0, (&mut dp, lk, 1));
            for (drow, prow) in dp.chunks_exact_mut(lk).zip(p.chunks_exact(lk)) {
                let dot: f64 = drow.iter().zip(prow).map(|(a, b)| a * b).sum();
                drow.iter_mut().zip(prow).for_each(|(dv, pv)| *dv = pv * (*dv - dot));
            }
            gemm(lq, lk, dh, scale, (&dp, lk, 1), (&k[k0..], d, 1), 0.0, (&mut gq[q0..], d, 1));
            gemm(lk, lq, dh, scale, (&dp, 1, lk), (&q[q0..], d, 1), 0.0, (&mut gk[k0..], d, 1));
        }
    }
    (gq, gk, gv)
}

/// Plain weight buffers of an [`AttnBlock`], for precision-generic timing.
#[derive(Clone, Debug)]
pub struct AttnWeights<T> {
    pub width: usize,
    pub heads: usize,
    /// q, k, v, o projections, each `([d_in, d_out], [d_out])`.
    pub proj: [(Vec<T>, Vec<T>); 4],
}

fn project<T: Real>(x: &[T], rows: usize, d: usize, (w, b): &(Vec<T>, Vec<T>)) -> Vec<T> {
    let mut out: Vec<T> = b.iter().copied().cycle().take(rows * d).collect();
    gemm(rows, d, d, T::one(), (x, d, 1), (w, d, 1), T::one(), (&mut out, d, 1));
    out
}

/// Self-attention block forward on raw buffers: `x + O(attn(Qx, Kx, Vx))`.
pub fn attention_block_forward<T: Real>(x: &[T], batch: usize, len: usize, w: &AttnWeights<T>, threaded: bool) -> Result<Vec<T>> {
    let d = w.width;
    let rows = batch * len;
    if x.len() != rows * d {
        return Err(Error::Data(format!("attention input has {} elements, expected {}", x.len(), rows * d)));
    }
    let [pq, pk, pv, po] = &w.proj;
    let (q, k, v) = (project(x, rows, d, pq), project(x, rows, d, pk), project(x, rows, d, pv));
    let dims = AttnDims { batch, lq: len, lk: len, width: d, heads: w.heads };
    let (a, _) = sdpa(&q, &k, &v, &dims, false, threaded)?;
    let mut out = project(&a, rows, d, po);
    out.iter_mut().zip(x).for_each(|(o, xi)| *o = *o + *xi);
    Ok(out)
}

/// Multi-head attention with output projection and residual.
#[derive(Debug)]
pub struct AttnBlock {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl AttnBlock {
    pub fn new(f: &ParamFactory, d: usize, heads: usize) -> Result<Self> {
        AttnDims { batch: 0, lq: 0, lk: 0, width: d, heads }.validate()?;
        Ok(Self {
            q: Linear::new(&f.pp("q"), d, d)?,
            k: Linear::new(&f.pp("k"), d, d)?,
            v: Linear::new(&f.pp("v"), d, d)?,
            o: Linear::new(&f.pp("o"), d, d)?,
            heads,
        })
    }

    /// Self-attention: `x + O(attn(Qx, Kx, Vx))`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_cross(x, x)
    }

    /// Queries from `x`, keys and values from `ctx`.
    pub fn forward_cross(&self, x: &Tensor, ctx: &Tensor) -> Result<Tensor> {
        let a = attention(&self.q.forward(x)?, &self.k.forward(ctx)?, &self.v.forward(ctx)?, self.heads)?;
        x.add(&self.o.forward(&a)?)
    }

    pub fn weights<T: Real>(&self) -> AttnWeights<T> {
        let conv = |l: &Linear| {
            let w = l.weight.to_vec().iter().map(|&v| T::lit(v)).collect();
            let b = match &l.bias {
                Some(b) => b.to_vec().iter().map(|&v| T::lit(v)).collect(),
                None => vec![T::zero(); l.out_dim()],
            };
            (w, b)
        };
        AttnWeights { width: self.q.in_dim(), heads: self.heads, proj: [conv(&self.q), conv(&self.k), conv(&self.v), conv(&self.o)] }
    }
}

impl Module for AttnBlock {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        for l in [&self.q, &self.k, &self.v, &self.o] {
            l.visit_params(f);
        }
    }
}

/// Self-attention, cross-attention to the partner and a feed-forward layer,
/// each behind a condition-modulated norm.
#[derive(Debug)]
pub struct AttnInterBlock {
    pub norm_self: AdaLn,
    pub self_attn: AttnBlock,
    pub norm_cross: AdaLn,
    pub cross_attn: AttnBlock,
    pub norm_ffn: AdaLn,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

impl AttnInterBlock {
    pub fn new(f: &ParamFactory, d: usize, cond_dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            norm_self: AdaLn::new(&f.pp("norm_self"), cond_dim, d)?,
            self_attn: AttnBlock::new(&f.pp("self_attn"), d, heads)?,
            norm_cross: AdaLn::new(&f.pp("norm_cross"), cond_dim, d)?,
            cross_attn: AttnBlock::new(&f.pp("cross_attn"), d, heads)?,
            norm_ffn: AdaLn::new(&f.pp("norm_ffn"), cond_dim, d)?,
            ffn_in: Linear::new(&f.pp("ffn_in"), d, FFN_MULT * d)?,
            ffn_out: Linear::new(&f.pp("ffn_out"), FFN_MULT * d, d)?,
        })
    }

    /// `h` stacks both persons along the batch axis, `[2Bt, L, D]`; `cond`
    /// is `[2Bt, Dc]`.
    pub fn forward(&self, h: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let bt = h.dim(0) / 2;
        let h = self.self_attn.forward(&self.norm_self.forward(h, cond)?)?;
        let n = self.norm_cross.forward(&h, cond)?;
        let partner = Tensor::concat(&[&n.narrow(0, bt, bt)?, &n.narrow(0, 0, bt)?], 0)?;
        let h = self.cross_attn.forward_cross(&n, &partner)?;
        let ff = self.ffn_out.forward(&self.ffn_in.forward(&self.norm_ffn.forward(&h, cond)?)?.silu())?;
        h.add(&ff)
    }
}

impl Module for AttnInterBlock {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.norm_self.visit_params(f);
        self.self_attn.visit_params(f);
        self.norm_cross.visit_params(f);
        self.cross_attn.visit_params(f);
        self.norm_ffn.visit_params(f);
        self.ffn_in.visit_params(f);
        self.ffn_out.visit_params(f);
    }
}

/// Attention-based two-person denoiser with the same embedding, condition
/// and head layout as [`crate::blocks::Denoiser`].
#[derive(Debug)]
pub struct AttnDenoiser {
    pub config: DenoiserConfig,
    pub input_proj: Linear,
    pub cond: CondEncoder,
    pub cond_proj: Linear,
    pub blocks: Vec<AttnInterBlock>,
    pub final_norm: LayerNorm,
    pub head: Linear,
}

impl AttnDenoiser {
    pub fn new(config: DenoiserConfig, heads: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let f = ParamFactory::new(seed);
        let (d, p, dc) = (config.d_model, config.pose_dim(), config.cond_dim);
        let blocks = (0..config.n_blocks)
            .map(|i| AttnInterBlock::new(&f.pp(&format!("block{i}")), d, dc, heads))
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

    pub fn forward(&self, x_a: &Tensor, x_b: &Tensor, cond: &CondBatch) -> Result<(Tensor, Tensor)> {
        if x_a.shape() != x_b.shape() || x_a.rank() != 3 || x_a.dim(2) != self.config.pose_dim() {
            return Err(Error::Data(format!("person sequences {:?} and {:?} do not fit the model", x_a.shape(), x_b.shape())));
        }
        let bt = x_a.dim(0);
        let c = self.cond.forward(cond)?;
        let c2 = Tensor::concat(&[&c, &c], 0)?;
        let c_emb = self.cond_proj.forward(&c2)?.reshape(&[2 * bt, 1, self.config.d_model])?;
        let pe = frame_embedding(x_a.dim(1), self.config.d_model);
        let mut h = self.input_proj.forward(&Tensor::concat(&[x_a, x_b], 0)?)?.add(&c_emb)?.add(&pe)?;
        for blk in &self.blocks {
            h = blk.forward(&h, &c2)?;
        }
        let out = self.head.forward(&self.final_norm.forward(&h)?)?;
        Ok((out.narrow(0, 0, bt)?, out.narrow(0, bt, bt)?))
    }
}

impl X0Model for AttnDenoiser {
    fn predict_x0(&self, x_t: &Tensor, cond: &CondBatch) -> Result<Tensor> {
        let (a, b) = split_pair(x_t)?;
        let (xa, xb) = self.forward(&a, &b, cond)?;
        add_skip(join_pair(&xa, &xb)?, x_t, cond)
    }
}

impl Module for AttnDenoiser {
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
    use crate::blocks::Denoiser;
    use crate::gradcheck;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Direct double loop over queries and keys.
    fn loop_oracle(q: &[f64], k: &[f64], v: &[f64], dims: &AttnDims) -> Vec<f64> {
        let AttnDims { batch, lq, lk, width: d, heads } = *dims;
        let dh = d / heads;
        let mut out = vec![0.0; batch * lq * d];
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..lq {
                    let scores: Vec<f64> = (0..lk)
                        .map(|j| (0..dh).map(|c| q[(b * lq + i) * d + h * dh + c] * k[(b * lk + j) * d + h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                        .collect();
                    let m = scores.iter().cloned().fold(f64::MIN, f64::max);
                    let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                    for c in 0..dh {
                        out[(b * lq + i) * d + h * dh + c] =
                            (0..lk).map(|j| (scores[j] - m).exp() / z * v[(b * lk + j) * d + h * dh + c]).sum();
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dims = AttnDims { batch: 2, lq: 5, lk: 7, width: 8, heads: 4 };
        let q = rand_vec(&mut rng, 2 * 5 * 8);
        let k = rand_vec(&mut rng, 2 * 7 * 8);
        let v = rand_vec(&mut rng, 2 * 7 * 8);
        let (got, probs) = sdpa(&q, &k, &v, &dims, true, false).unwrap();
        let want = loop_oracle(&q, &k, &v, &dims);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
        for row in probs.chunks_exact(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let (threaded, _) = sdpa(&q, &k, &v, &dims, false, true).unwrap();
        assert_eq!(threaded, got);
    }

    #[test]
    fn uniform_keys_give_uniform_weights() {
        let dims = AttnDims { batch: 1, lq: 3, lk: 6, width: 4, heads: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = rand_vec(&mut rng, 12);
        let k = [0.3, -0.2, 0.5, 0.1].repeat(6);
        let v = rand_vec(&mut rng, 24);
        let (_, probs) = sdpa(&q, &k, &v, &dims, true, false).unwrap();
        assert!(probs.iter().all(|p| (p - 1.0 / 6.0).abs() < 1e-15));
    }

    #[test]
    fn single_position_returns_value_path_plus_residual() {
        let f = ParamFactory::new(2);
        let blk = AttnBlock::new(&f, 8, 4).unwrap();
        let x = Tensor::rand_uniform(&[3, 1, 8], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
        let got = blk.forward(&x).unwrap();
        let want = x.add(&blk.o.forward(&blk.v.forward(&x).unwrap()).unwrap()).unwrap();
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-14);
        }
    }

    #[test]
    fn raw_block_matches_tensor_block_in_both_precisions() {
        let f = ParamFactory::new(4);
        let blk = AttnBlock::new(&f, 8, 4).unwrap();
        let x = Tensor::rand_uniform(&[2, 9, 8], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(5));
        let want = blk.forward(&x).unwrap();
        let got = attention_block_forward(x.data(), 2, 9, &blk.weights::<f64>(), false).unwrap();
        for (g, w) in got.iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-13);
        }
        let x32: Vec<f32> = x.data().iter().map(|&v| v as f32).collect();
        let got32 = attention_block_forward(&x32, 2, 9, &blk.weights::<f32>(), false).unwrap();
        for (g, w) in got32.iter().zip(want.data()) {
            assert!((*g as f64 - w).abs() < 1e-4);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let f = ParamFactory::new(6);
        let blk = AttnBlock::new(&f, 8, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::rand_uniform(&[2, 5, 8], -1.0, 1.0, &mut rng);
        let ctx = Tensor::rand_uniform(&[2, 4, 8], -1.0, 1.0, &mut rng);
        let weights = Tensor::rand_uniform(&[2, 5, 8], -1.0, 1.0, &mut rng);
        let params = blk.parameters();
        let report = gradcheck::check(&params, gradcheck::DEFAULT_STEP, || {
            blk.forward_cross(&x, &ctx)?.mul(&weights).map(|t| t.sum_all())
        })
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

    #[test]
    fn rejects_indivisible_heads() {
        assert!(matches!(AttnBlock::new(&ParamFactory::new(0), 10, 4), Err(Error::Config(_))));
    }

    #[test]
    fn baseline_has_more_parameters_than_state_space_model() {
        let cfg = DenoiserConfig::default();
        let ssm = Denoiser::new(cfg.clone(), 0).unwrap().param_count();
        let attn = AttnDenoiser::new(cfg, DEFAULT_HEADS, 0).unwrap().param_count();
        assert!(ssm < attn, "{ssm} vs {attn}");
    }

    #[test]
    fn denoiser_has_zero_head_and_predicts_pairs() {
        let cfg = DenoiserConfig { n_blocks: 1, d_model: 8, cond_dim: 8, seq_len: 6, joints: 2, ..DenoiserConfig::default() };
        let m = AttnDenoiser::new(cfg, 2, 1).unwrap();
        let x = Tensor::rand_uniform(&[2, 2, 6, 28], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(8));
        let cond = CondBatch::new(vec![5, 9], vec![0, 2], vec![false, true]).unwrap();
        let out = m.predict_x0(&x, &cond).unwrap();
        assert_eq!(out.shape(), x.shape());
        assert!(out.data().iter().all(|&v| v == 0.0));
    }
}
