//! Differentiable layers: affine maps, normalization and sequence convolutions.

use crate::error::{Error, Result};
use crate::kernels::gemm;
use crate::param::{Init, Module, ParamFactory, Parameter};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// `y = x·W + b` over the last axis of `x`. `w` is `[d_in, d_out]`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let (din, dout) = match w.shape() {
        [i, o] => (*i, *o),
        s => return Err(Error::shape("linear", x.shape(), s)),
    };
    if x.rank() == 0 || x.shape()[x.rank() - 1] != din {
        return Err(Error::shape("linear", x.shape(), w.shape()));
    }
    if let Some(b) = b {
        if b.shape() != [dout] {
            return Err(Error::shape("linear bias", w.shape(), b.shape()));
        }
    }
    let rows = x.numel() / din;
    let mut out = vec![0.0; rows * dout];
    let beta = match b {
        Some(b) => {
            for row in out.chunks_exact_mut(dout) {
                row.copy_from_slice(b.data());
            }
            1.0
        }
        None => 0.0,
    };
    gemm(rows, din, dout, 1.0, (x.data(), din, 1), (w.data(), dout, 1), beta, (&mut out, dout, 1));

    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank >= 1") = dout;
    let mut parents = vec![x.clone(), w.clone()];
    if let Some(b) = b {
        parents.push(b.clone());
    }
    let (xs, ws) = (x.clone(), w.clone());
    let has_bias = b.is_some();
    let bias_needs = b.map(|b| b.requires_grad()).unwrap_or(false);
    Ok(Tensor::from_op(
        "linear",
        out,
        shape,
        parents,
        Box::new(move |g| {
            let gx = xs.requires_grad().then(|| {
                let mut gx = vec![0.0; rows * din];
                gemm(rows, dout, din, 1.0, (g, dout, 1), (ws.data(), 1, dout), 0.0, (&mut gx, din, 1));
                gx
            });
            let gw = ws.requires_grad().then(|| {
                let mut gw = vec![0.0; din * dout];
                gemm(din, rows, dout, 1.0, (xs.data(), 1, din), (g, dout, 1), 0.0, (&mut gw, dout, 1));
                gw
            });
            let mut grads = vec![gx, gw];
            if has_bias {
                grads.push(bias_needs.then(|| {
                    let mut gb = vec![0.0; dout];
                    for row in g.chunks_exact(dout) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    gb
                }));
            }
            grads
        }),
    ))
}

/// Normalizes each row of the last axis to zero mean and unit variance,
/// then applies the optional affine `gamma`, `beta`.
pub fn layer_norm(x: &Tensor, gamma: Option<&Tensor>, beta: Option<&Tensor>, eps: f64) -> Result<Tensor> {
    let d = *x.shape().last().ok_or(Error::EmptyAxis { op: "layer_norm" })?;
    if d == 0 {
        return Err(Error::EmptyAxis { op: "layer_norm" });
    }
    for p in [gamma, beta].into_iter().flatten() {
        if p.shape() != [d] {
            return Err(Error::shape("layer_norm", x.shape(), p.shape()));
        }
    }
    let rows = x.numel() / d;
    let mut xhat = vec![0.0; x.numel()];
    let mut inv_std = vec![0.0; rows];
    for (r, (src, dst)) in x.data().chunks_exact(d).zip(xhat.chunks_exact_mut(d)).enumerate() {
        let mean = src.iter().sum::<f64>() / d as f64;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std[r] = inv;
        for (o, v) in dst.iter_mut().zip(src) {
            *o = (v - mean) * inv;
        }
    }
    let mut out = xhat.clone();
    for row in out.chunks_exact_mut(d) {
        if let Some(g) = gamma {
            row.iter_mut().zip(g.data()).for_each(|(o, g)| *o *= g);
        }
        if let Some(b) = beta {
            row.iter_mut().zip(b.data()).for_each(|(o, b)| *o += b);
        }
    }

    let mut parents = vec![x.clone()];
    parents.extend(gamma.cloned());
    parents.extend(beta.cloned());
    let xs = x.clone();
    let gamma_t = gamma.cloned();
    let (has_gamma, has_beta) = (gamma.is_some(), beta.is_some());
    Ok(Tensor::from_op(
        "layer_norm",
        out,
        x.shape().to_vec(),
        parents,
        Box::new(move |g| {
            let mut grads = Vec::with_capacity(3);
            let gx = xs.requires_grad().then(|| {
                let mut gx = vec![0.0; g.len()];
                let mut gxhat = vec![0.0; d];
                for r in 0..rows {
                    let gr = &g[r * d..(r + 1) * d];
                    let xr = &xhat[r * d..(r + 1) * d];
                    for i in 0..d {
                        gxhat[i] = gr[i] * gamma_t.as_ref().map_or(1.0, |t| t.data()[i]);
                    }
                    let mean_g = gxhat.iter().sum::<f64>() / d as f64;
                    let mean_gx = gxhat.iter().zip(xr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for i in 0..d {
                        gx[r * d + i] = inv_std[r] * (gxhat[i] - mean_g - xr[i] * mean_gx);
                    }
                }
                gx
            });
            grads.push(gx);
            if has_gamma {
                let mut gg = vec![0.0; d];
                for (gr, xr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                    for i in 0..d {
                        gg[i] += gr[i] * xr[i];
                    }
                }
                grads.push(Some(gg));
            }
            if has_beta {
                let mut gb = vec![0.0; d];
                for gr in g.chunks_exact(d) {
                    gb.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                }
                grads.push(Some(gb));
            }
            grads
        }),
    ))
}

/// Cross-correlation along the sequence axis of a channels-last tensor
/// `x[B, L, Cin]` with `w[Cout, Cin, k]`, zero padded to preserve `L`.
pub fn conv1d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (bsz, len, cin) = match x.shape() {
        [b, l, c] => (*b, *l, *c),
        s => return Err(Error::shape("conv1d", s, w.shape())),
    };
    let (cout, wcin, k) = match w.shape() {
        [o, i, k] => (*o, *i, *k),
        s => return Err(Error::shape("conv1d", x.shape(), s)),
    };
    if wcin != cin {
        return Err(Error::shape("conv1d", x.shape(), w.shape()));
    }
    if k % 2 == 0 {
        return Err(Error::Config(format!("conv kernel size must be odd, got {k}")));
    }
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::shape("conv1d bias", w.shape(), b.shape()));
        }
    }
    let pad = (k - 1) / 2;
    let mut out = vec![0.0; bsz * len * cout];
    if let Some(b) = bias {
        for row in out.chunks_exact_mut(cout) {
            row.copy_from_slice(b.data());
        }
    }
    // output rows t in [lo, hi) read input rows t + shift
    let taps: Vec<(usize, isize, usize, usize)> = (0..k)
        .filter_map(|j| {
            let shift = j as isize - pad as isize;
            let lo = (-shift).max(0) as usize;
            let hi = (len as isize - shift).min(len as isize).max(0) as usize;
            (lo < hi).then_some((j, shift, lo, hi))
        })
        .collect();
    let (xd, wd) = (x.data(), w.data());
    for b in 0..bsz {
        for &(j, shift, lo, hi) in &taps {
            let src = ((b * len) as isize + lo as isize + shift) as usize * cin;
            let dst = (b * len + lo) * cout;
            gemm(hi - lo, cin, cout, 1.0, (&xd[src..], cin, 1), (&wd[j..], k, cin * k), 1.0, (&mut out[dst..], cout, 1));
        }
    }

    let mut parents = vec![x.clone(), w.clone()];
    parents.extend(bias.cloned());
    let (xs, ws) = (x.clone(), w.clone());
    let has_bias = bias.is_some();
    Ok(Tensor::from_op(
        "conv1d",
        out,
        vec![bsz, len, cout],
        parents,
        Box::new(move |g| {
            let gx = xs.requires_grad().then(|| {
                let mut gx = vec![0.0; bsz * len * cin];
                for b in 0..bsz {
                    for &(j, shift, lo, hi) in &taps {
                        let src = (b * len + lo) * cout;
                        let dst = ((b * len) as isize + lo as isize + shift) as usize * cin;
                        gemm(hi - lo, cout, cin, 1.0, (&g[src..], cout, 1), (&ws.data()[j..], cin * k, k), 1.0, (&mut gx[dst..], cin, 1));
                    }
                }
                gx
            });
            let gw = ws.requires_grad().then(|| {
                let mut gw = vec![0.0; cout * cin * k];
                for b in 0..bsz {
                    for &(j, shift, lo, hi) in &taps {
                        let gsrc = (b * len + lo) * cout;
                        let xsrc = ((b * len) as isize + lo as isize + shift) as usize * cin;
                        gemm(cout, hi - lo, cin, 1.0, (&g[gsrc..], 1, cout), (&xs.data()[xsrc..], cin, 1), 1.0, (&mut gw[j..], cin * k, k));
                    }
                }
                gw
            });
            let mut grads = vec![gx, gw];
            if has_bias {
                let mut gb = vec![0.0; cout];
                for row in g.chunks_exact(cout) {
                    gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                grads.push(Some(gb));
            }
            grads
        }),
    ))
}

/// Sequence convolution on the channels-first layout `x[B, C, L]`.
/// Only kernel sizes 1 and 3 are supported.
pub fn conv_seq(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let k = w.shape().get(2).copied().unwrap_or(0);
    if k != 1 && k != 3 {
        return Err(Error::Config(format!("unsupported conv kernel size {k}; expected 1 or 3")));
    }
    conv1d(&x.transpose(1, 2)?, w, bias)?.transpose(1, 2)
}

/// Per-channel convolution along the sequence axis of `x[B, L, C]` with
/// `w[C, k]`, zero padded.
pub fn depthwise_conv1d(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let (bsz, len, ch) = match x.shape() {
        [b, l, c] => (*b, *l, *c),
        s => return Err(Error::shape("depthwise_conv1d", s, w.shape())),
    };
    let k = match w.shape() {
        [c, k] if *c == ch && k % 2 == 1 => *k,
        s => return Err(Error::shape("depthwise_conv1d", x.shape(), s)),
    };
    if let Some(b) = bias {
        if b.shape() != [ch] {
            return Err(Error::shape("depthwise_conv1d bias", w.shape(), b.shape()));
        }
    }
    let pad = (k - 1) / 2;
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![0.0; xd.len()];
    for b in 0..bsz {
        for t in 0..len {
            let row = &mut out[(b * len + t) * ch..(b * len + t + 1) * ch];
            if let Some(bias) = bias {
                row.copy_from_slice(bias.data());
            }
            for j in 0..k {
                let src_t = t as isize + j as isize - pad as isize;
                if src_t < 0 || src_t >= len as isize {
                    continue;
                }
                let src = &xd[(b * len + src_t as usize) * ch..(b * len + src_t as usize + 1) * ch];
                for c in 0..ch {
                    row[c] += wd[c * k + j] * src[c];
                }
            }
        }
    }

    let mut parents = vec![x.clone(), w.clone()];
    parents.extend(bias.cloned());
    let (xs, ws) = (x.clone(), w.clone());
    let has_bias = bias.is_some();
    Ok(Tensor::from_op(
        "depthwise_conv1d",
        out,
        vec![bsz, len, ch],
        parents,
        Box::new(move |g| {
            let (xd, wd) = (xs.data(), ws.data());
            let mut gx = vec![0.0; xd.len()];
            let mut gw = vec![0.0; wd.len()];
            let mut gb = vec![0.0; ch];
            for b in 0..bsz {
                for t in 0..len {
                    let grow = &g[(b * len + t) * ch..(b * len + t + 1) * ch];
                    gb.iter_mut().zip(grow).for_each(|(a, b)| *a += b);
                    for j in 0..k {
                        let src_t = t as isize + j as isize - pad as isize;
                        if src_t < 0 || src_t >= len as isize {
                            continue;
                        }
                        let base = (b * len + src_t as usize) * ch;
                        for c in 0..ch {
                            gx[base + c] += wd[c * k + j] * grow[c];
                            gw[c * k + j] += xd[base + c] * grow[c];
                        }
                    }
                }
            }
            let mut grads = vec![Some(gx), Some(gw)];
            if has_bias {
                grads.push(Some(gb));
            }
            grads
        }),
    ))
}

#[derive(Debug)]
pub struct Linear {
    pub weight: Parameter,
    pub bias: Option<Parameter>,
}

impl Linear {
    pub fn new(f: &ParamFactory, din: usize, dout: usize) -> Result<Self> {
        Ok(Self {
            weight: f.param("weight", &[din, dout], Init::FanIn(din))?,
            bias: Some(f.param("bias", &[dout], Init::FanIn(din))?),
        })
    }

    pub fn zeros(f: &ParamFactory, din: usize, dout: usize) -> Result<Self> {
        Ok(Self {
            weight: f.param("weight", &[din, dout], Init::Zeros)?,
            bias: Some(f.param("bias", &[dout], Init::Zeros)?),
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let b = self.bias.as_ref().map(|b| b.tensor());
        linear(x, &self.weight.tensor(), b.as_ref())
    }
}

impl Module for Linear {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        f(&self.weight);
        if let Some(b) = &self.bias {
            f(b);
        }
    }
}

#[derive(Debug)]
pub struct LayerNorm {
    pub gamma: Parameter,
    pub beta: Parameter,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(f: &ParamFactory, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: f.param("gamma", &[dim], Init::Constant(1.0))?,
            beta: f.param("beta", &[dim], Init::Zeros)?,
            eps: LN_EPS,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        layer_norm(x, Some(&self.gamma.tensor()), Some(&self.beta.tensor()), self.eps)
    }
}

impl Module for LayerNorm {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        f(&self.gamma);
        f(&self.beta);
    }
}

/// Adaptive layer norm: `LN(x) * (1 + scale(cond)) + shift(cond)`, with the
/// scale and shift heads zero-initialized so a fresh layer is a plain LN.
#[derive(Debug)]
pub struct AdaLn {
    pub scale: Linear,
    pub shift: Linear,
    pub eps: f64,
}

impl AdaLn {
    pub fn new(f: &ParamFactory, cond_dim: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            scale: Linear::zeros(&f.pp("scale"), cond_dim, dim)?,
            shift: Linear::zeros(&f.pp("shift"), cond_dim, dim)?,
            eps: LN_EPS,
        })
    }

    /// `x[B, L, D]`, `cond[B, Dc]`.
    pub fn forward(&self, x: &Tensor, cond: &Tensor) -> Result<Tensor> {
        if x.rank() != 3 || cond.rank() != 2 || x.dim(0) != cond.dim(0) {
            return Err(Error::shape("ada_ln", x.shape(), cond.shape()));
        }
        let (b, d) = (x.dim(0), x.dim(2));
        let normed = layer_norm(x, None, None, self.eps)?;
        let scale = self.scale.forward(cond)?.add_scalar(1.0).reshape(&[b, 1, d])?;
        let shift = self.shift.forward(cond)?.reshape(&[b, 1, d])?;
        normed.mul(&scale)?.add(&shift)
    }
}

impl Module for AdaLn {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        self.scale.visit_params(f);
        self.shift.visit_params(f);
    }
}

/// Full convolution on channels-last sequences.
#[derive(Debug)]
pub struct Conv1d {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl Conv1d {
    pub fn new(f: &ParamFactory, cin: usize, cout: usize, k: usize) -> Result<Self> {
        if k != 1 && k != 3 {
            return Err(Error::Config(format!("unsupported conv kernel size {k}; expected 1 or 3")));
        }
        Ok(Self {
            weight: f.param("weight", &[cout, cin, k], Init::FanIn(cin * k))?,
            bias: f.param("bias", &[cout], Init::FanIn(cin * k))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv1d(x, &self.weight.tensor(), Some(&self.bias.tensor()))
    }
}

impl Module for Conv1d {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        f(&self.weight);
        f(&self.bias);
    }
}

#[derive(Debug)]
pub struct DepthwiseConv1d {
    pub weight: Parameter,
    pub bias: Parameter,
}

impl DepthwiseConv1d {
    pub fn new(f: &ParamFactory, channels: usize, k: usize) -> Result<Self> {
        Ok(Self {
            weight: f.param("weight", &[channels, k], Init::FanIn(k))?,
            bias: f.param("bias", &[channels], Init::FanIn(k))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        depthwise_conv1d(x, &self.weight.tensor(), Some(&self.bias.tensor()))
    }
}

impl Module for DepthwiseConv1d {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        f(&self.weight);
        f(&self.bias);
    }
}
