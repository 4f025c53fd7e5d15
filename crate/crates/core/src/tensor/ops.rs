use super::shape::{broadcast_shape, broadcast_strides, contiguous_strides, for_each_broadcast, numel};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        }
    }

    #[inline(always)]
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
            Binary::Div => a / b,
        }
    }
}

/// Numerically safe logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(1 + e^x) without overflow for large |x|.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Sums a broadcast gradient back down to `target` shape.
fn reduce_to(g: &[f64], out: &[usize], target: &[usize]) -> Vec<f64> {
    if out == target {
        return g.to_vec();
    }
    let mut acc = vec![0.0; numel(target)];
    let st = broadcast_strides(target, out);
    let zeros = vec![0; out.len()];
    for_each_broadcast(out, &st, &zeros, |o, t, _| acc[t] += g[o]);
    acc
}

impl Tensor {
    fn binary(&self, rhs: &Tensor, op: Binary) -> Result<Tensor> {
        let out_shape = broadcast_shape(self.shape(), rhs.shape())
            .ok_or_else(|| Error::shape(op.name(), self.shape(), rhs.shape()))?;
        let (a, b) = (self.data(), rhs.data());
        let n = numel(&out_shape);
        let mut out = vec![0.0; n];
        if self.shape() == rhs.shape() {
            for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
                *o = op.apply(x, y);
            }
        } else if rhs.numel() == 1 && out_shape == self.shape() {
            let y = b[0];
            for (o, &x) in out.iter_mut().zip(a) {
                *o = op.apply(x, y);
            }
        } else {
            let sa = broadcast_strides(self.shape(), &out_shape);
            let sb = broadcast_strides(rhs.shape(), &out_shape);
            for_each_broadcast(&out_shape, &sa, &sb, |o, i, j| out[o] = op.apply(a[i], b[j]));
        }

        let (lhs_t, rhs_t) = (self.clone(), rhs.clone());
        let shape_c = out_shape.clone();
        Ok(Tensor::from_op(
            op.name(),
            out,
            out_shape,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                let (ls, rs) = (lhs_t.shape(), rhs_t.shape());
                match op {
                    Binary::Add => vec![
                        lhs_t.requires_grad().then(|| reduce_to(g, &shape_c, ls)),
                        rhs_t.requires_grad().then(|| reduce_to(g, &shape_c, rs)),
                    ],
                    Binary::Sub => vec![
                        lhs_t.requires_grad().then(|| reduce_to(g, &shape_c, ls)),
                        rhs_t.requires_grad().then(|| {
                            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                            reduce_to(&neg, &shape_c, rs)
                        }),
                    ],
                    Binary::Mul | Binary::Div => {
                        let (a, b) = (lhs_t.data(), rhs_t.data());
                        let mut ga = vec![0.0; a.len()];
                        let mut gb = vec![0.0; b.len()];
                        let sa = broadcast_strides(ls, &shape_c);
                        let sb = broadcast_strides(rs, &shape_c);
                        match op {
                            Binary::Mul => for_each_broadcast(&shape_c, &sa, &sb, |o, i, j| {
                                ga[i] += g[o] * b[j];
                                gb[j] += g[o] * a[i];
                            }),
                            _ => for_each_broadcast(&shape_c, &sa, &sb, |o, i, j| {
                                let inv = 1.0 / b[j];
                                ga[i] += g[o] * inv;
                                gb[j] -= g[o] * a[i] * inv * inv;
                            }),
                        }
                        vec![
                            lhs_t.requires_grad().then_some(ga),
                            rhs_t.requires_grad().then_some(gb),
                        ]
                    }
                }
            }),
        ))
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, Binary::Add)
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, Binary::Sub)
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, Binary::Mul)
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        self.binary(rhs, Binary::Div)
    }

    /// Elementwise map with derivative `df(x, y)`.
    fn unary(
        &self,
        op: &'static str,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Tensor {
        let out: Vec<f64> = self.data().iter().map(|&x| f(x)).collect();
        if !Tensor::should_record(&[self]) {
            return Tensor::constant_from(op, self, out, self.shape().to_vec());
        }
        let input = self.clone();
        let saved = out.clone();
        Tensor::from_op(
            op,
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |g| {
                let gx = g
                    .iter()
                    .zip(input.data())
                    .zip(&saved)
                    .map(|((g, &x), &y)| g * df(x, y))
                    .collect();
                vec![Some(gx)]
            }),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.unary("neg", |x| -x, |_, _| -1.0)
    }

    pub fn exp(&self) -> Tensor {
        self.unary("exp", f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Tensor {
        self.unary("ln", f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary("sqrt", f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(&self) -> Tensor {
        self.unary("square", |x| x * x, |x, _| 2.0 * x)
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary("sigmoid", sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn silu(&self) -> Tensor {
        self.unary(
            "silu",
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            },
        )
    }

    pub fn softplus(&self) -> Tensor {
        self.unary("softplus", softplus, |x, _| sigmoid(x))
    }

    pub fn tanh(&self) -> Tensor {
        self.unary("tanh", f64::tanh, |_, y| 1.0 - y * y)
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.unary(
            "clamp",
            move |x| x.clamp(lo, hi),
            move |x, _| if x > lo && x < hi { 1.0 } else { 0.0 },
        )
    }

    /// `x * mul + add`.
    pub fn affine(&self, mul: f64, add: f64) -> Tensor {
        self.unary("affine", move |x| x * mul + add, move |_, _| mul)
    }

    pub fn mul_scalar(&self, s: f64) -> Tensor {
        self.affine(s, 0.0)
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        self.affine(1.0, s)
    }

    pub fn sum_all(&self) -> Tensor {
        let total: f64 = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(
            "sum_all",
            vec![total],
            Vec::new(),
            vec![self.clone()],
            Box::new(move |g| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.numel().max(1);
        self.sum_all().mul_scalar(1.0 / n as f64)
    }

    /// Sum over one axis.
    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Index {
                op: "sum_axis",
                index: axis,
                len: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let src = &x[(o * len + k) * inner..(o * len + k + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
            }
        }
        let mut out_shape = shape.clone();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        Ok(Tensor::from_op(
            "sum_axis",
            out,
            out_shape,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for k in 0..len {
                        gx[(o * len + k) * inner..(o * len + k + 1) * inner].copy_from_slice(src);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        let len = *self.shape().get(axis).ok_or(Error::Index {
            op: "mean_axis",
            index: axis,
            len: self.rank(),
        })?;
        if len == 0 {
            return Err(Error::EmptyAxis { op: "mean_axis" });
        }
        Ok(self.sum_axis(axis, keepdim)?.mul_scalar(1.0 / len as f64))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            "reshape",
            self.data().to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(|g| vec![Some(g.to_vec())]),
        ))
    }

    /// Swaps two axes, materializing the result contiguously.
    pub fn transpose(&self, a0: usize, a1: usize) -> Result<Tensor> {
        let rank = self.rank();
        if a0 >= rank || a1 >= rank {
            return Err(Error::Index {
                op: "transpose",
                index: a0.max(a1),
                len: rank,
            });
        }
        let mut out_shape = self.shape().to_vec();
        out_shape.swap(a0, a1);
        let out = permute_copy(self.data(), self.shape(), a0, a1);
        let shape_c = out_shape.clone();
        Ok(Tensor::from_op(
            "transpose",
            out,
            out_shape,
            vec![self.clone()],
            Box::new(move |g| vec![Some(permute_copy(g, &shape_c, a0, a1))]),
        ))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Index {
                op: "narrow",
                index: start + len,
                len: shape.get(axis).copied().unwrap_or(0),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let full = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            out.extend_from_slice(&x[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        Ok(Tensor::from_op(
            "narrow",
            out,
            out_shape,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; outer * full * inner];
                for o in 0..outer {
                    let base = (o * full + start) * inner;
                    gx[base..base + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Joins tensors along `axis`; all other axes must agree.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::Index {
                op: "concat",
                index: axis,
                len: rank,
            });
        }
        for p in parts {
            let ok = p.rank() == rank
                && (0..rank).all(|i| i == axis || p.shape()[i] == first.shape()[i]);
            if !ok {
                return Err(Error::shape("concat", first.shape(), p.shape()));
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                out.extend_from_slice(&p.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = total;
        let flags: Vec<bool> = parts.iter().map(|p| p.requires_grad()).collect();
        Ok(Tensor::from_op(
            "concat",
            out,
            out_shape,
            parts.iter().map(|&p| p.clone()).collect(),
            Box::new(move |g| {
                let mut grads: Vec<Vec<f64>> = lens
                    .iter()
                    .map(|&l| Vec::with_capacity(outer * l * inner))
                    .collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (gp, &l) in grads.iter_mut().zip(&lens) {
                        gp.extend_from_slice(&g[off..off + l * inner]);
                        off += l * inner;
                    }
                }
                grads
                    .into_iter()
                    .zip(&flags)
                    .map(|(gp, &f)| f.then_some(gp))
                    .collect()
            }),
        ))
    }

    /// Gathers `indices` along `axis` (repeats allowed).
    pub fn select(&self, axis: usize, indices: &[usize]) -> Result<Tensor> {
        let shape = self.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Index {
                op: "select",
                index: axis,
                len: shape.len(),
            });
        }
        let full = shape[axis];
        if let Some(&bad) = indices.iter().find(|&&i| i >= full) {
            return Err(Error::Index {
                op: "select",
                index: bad,
                len: full,
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.data();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let base = (o * full + i) * inner;
                out.extend_from_slice(&x[base..base + inner]);
            }
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = indices.len();
        let idx = indices.to_vec();
        Ok(Tensor::from_op(
            "select",
            out,
            out_shape,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; outer * full * inner];
                let mut off = 0;
                for o in 0..outer {
                    for &i in &idx {
                        let base = (o * full + i) * inner;
                        gx[base..base + inner]
                            .iter_mut()
                            .zip(&g[off..off + inner])
                            .for_each(|(a, b)| *a += b);
                        off += inner;
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }
}

/// Contiguous copy of `x` (with `shape`) with axes `a0` and `a1` swapped.
pub(crate) fn permute_copy<T: Copy + Default>(x: &[T], shape: &[usize], a0: usize, a1: usize) -> Vec<T> {
    if a0 == a1 {
        return x.to_vec();
    }
    let mut out_shape = shape.to_vec();
    out_shape.swap(a0, a1);
    let in_strides = contiguous_strides(shape);
    let mut src_strides = in_strides.clone();
    src_strides.swap(a0, a1);
    let zeros = vec![0; shape.len()];
    let mut out = vec![T::default(); x.len()];
    for_each_broadcast(&out_shape, &src_strides, &zeros, |o, i, _| out[o] = x[i]);
    out
}
