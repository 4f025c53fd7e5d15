//! Precision-generic slice kernels shared by the differentiable ops and the
//! benchmarks.
//!
//! The selective scan lives here in three schedules over the same
//! recurrence `h_t = exp(Δ_t a) h_{t-1} + b̄_t x_t`, `y_t = <C_t, h_t>`:
//!
//! | Function | Schedule |
//! |----------|----------|
//! | [`scan_sequential`] | one pass over time per lane |
//! | [`scan_parallel`] | work-efficient up-sweep / down-sweep tree over time |
//! | [`scan_chunked`] | sequential inside fixed chunks, tree across chunk summaries |
//!
//! A lane is one `(batch, channel)` pair carrying an `N`-wide diagonal state.
//! Lanes are independent and may be spread over worker threads; the result
//! does not depend on how many.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating-point element type usable by the kernels.
pub trait Real: Float + FromPrimitive + Default + Debug + Send + Sync + 'static {
    /// `c = alpha * a·b + beta * c` on strided row/column-major views.
    ///
    /// # Safety
    /// Every offset reachable through the given strides must lie inside the
    /// corresponding slice. [`gemm`] checks this before calling.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable literal")
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Strided matrix view: (slice, row stride, column stride).
pub type View<'a, T> = (&'a [T], usize, usize);

fn max_offset(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs
    }
}

/// Bounds-checked `c[m×n] = alpha * a[m×k] · b[k×n] + beta * c`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: View<'_, T>,
    b: View<'_, T>,
    beta: T,
    c: (&mut [T], usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let (a, rsa, csa) = a;
    let (b, rsb, csb) = b;
    let (c, rsc, csc) = c;
    assert!(k == 0 || max_offset(m, k, rsa, csa) < a.len(), "gemm: lhs out of bounds");
    assert!(k == 0 || max_offset(k, n, rsb, csb) < b.len(), "gemm: rhs out of bounds");
    assert!(max_offset(m, n, rsc, csc) < c.len(), "gemm: output out of bounds");
    // SAFETY: all reachable offsets were checked above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        )
    }
}

/// Below this |Δa| the ZOH input gain uses its two-term series.
pub const ZOH_SERIES_THRESHOLD: f64 = 1e-6;

/// Zero-order-hold discretization of one diagonal state entry.
///
/// Returns `(ā, b̄)` with `ā = exp(Δa)` and `b̄ = (exp(Δa) − 1)/(Δa) · Δb`.
#[inline]
pub fn zoh<T: Real>(a: T, b: T, delta: T) -> (T, T) {
    let z = delta * a;
    let em1 = z.exp_m1();
    let gain = if z.abs() < T::lit(ZOH_SERIES_THRESHOLD) { T::one() + z * T::lit(0.5) } else { em1 / z };
    (T::one() + em1, gain * delta * b)
}

/// `φ(z) = expm1(z)/z` and its derivative, stable near zero.
#[inline]
pub(crate) fn zoh_gain_and_slope(z: f64) -> (f64, f64) {
    if z.abs() < ZOH_SERIES_THRESHOLD {
        (1.0 + 0.5 * z, 0.5 + z / 3.0)
    } else {
        let phi = z.exp_m1() / z;
        let slope = if z.abs() < 1e-3 {
            0.5 + z / 3.0 + z * z / 8.0
        } else {
            (z.exp() - phi) / z
        };
        (phi, slope)
    }
}

/// Inputs of one selective scan, all row-major.
#[derive(Clone, Copy, Debug)]
pub struct ScanProblem<'a, T> {
    pub batch: usize,
    pub len: usize,
    pub channels: usize,
    pub state: usize,
    /// `[batch, len, channels]`
    pub x: &'a [T],
    /// `[batch, len, channels]`, strictly positive
    pub delta: &'a [T],
    /// `[channels, state]`, the diagonal continuous-time state matrix
    pub a: &'a [T],
    /// `[batch, len, state]`
    pub b: &'a [T],
    /// `[batch, len, state]`
    pub c: &'a [T],
}

impl<T: Real> ScanProblem<'_, T> {
    pub fn validate(&self) -> Result<()> {
        let seq = self.batch * self.len * self.channels;
        let sel = self.batch * self.len * self.state;
        let checks = [
            ("x", self.x.len(), seq),
            ("delta", self.delta.len(), seq),
            ("a", self.a.len(), self.channels * self.state),
            ("b", self.b.len(), sel),
            ("c", self.c.len(), sel),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::Data(format!(
                    "scan input {name} has {got} elements, expected {want}"
                )));
            }
        }
        Ok(())
    }

    fn lanes(&self) -> usize {
        self.batch * self.channels
    }

    #[inline]
    fn seq_idx(&self, b: usize, t: usize, d: usize) -> usize {
        (b * self.len + t) * self.channels + d
    }

    #[inline]
    fn sel_row(&self, b: usize, t: usize) -> usize {
        (b * self.len + t) * self.state
    }

    /// Discretized `(ā, b̄·x)` for lane `(b, d)`, step `t`, state `n`.
    #[inline]
    fn element(&self, b: usize, d: usize, t: usize, n: usize) -> (T, T) {
        let i = self.seq_idx(b, t, d);
        let (a_bar, b_bar) = zoh(self.a[d * self.state + n], self.b[self.sel_row(b, t) + n], self.delta[i]);
        (a_bar, b_bar * self.x[i])
    }
}

/// Largest `|got − want| / max(|want|, floor)` over paired elements.
pub fn max_rel_diff<T: Real>(got: &[T], want: &[T], floor: f64) -> f64 {
    got.iter()
        .zip(want)
        .map(|(&g, &w)| {
            let (g, w) = (g.to_f64().unwrap_or(f64::NAN), w.to_f64().unwrap_or(f64::NAN));
            let r = (g - w).abs() / w.abs().max(floor);
            if r.is_nan() { f64::INFINITY } else { r }
        })
        .fold(if got.len() == want.len() { 0.0 } else { f64::INFINITY }, f64::max)
}

/// Output of a scan: `y[batch, len, channels]` and optionally the full
/// state history `[batch, len, channels, state]` for the backward pass.
#[derive(Clone, Debug)]
pub struct ScanOutput<T> {
    pub y: Vec<T>,
    pub states: Option<Vec<T>>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScanMode {
    Sequential,
    Parallel,
    #[default]
    Chunked,
}

/// Binary operator composing two affine state updates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Combine {
    /// `(a₁,b₁)∘(a₂,b₂) = (a₂a₁, a₂b₁ + b₂)`
    #[default]
    Affine,
    /// Deliberately wrong composition order; negative control for the
    /// scan-equivalence oracle only.
    SwappedOrder,
}

impl Combine {
    #[inline]
    fn apply<T: Real>(self, first: (T, T), second: (T, T)) -> (T, T) {
        match self {
            Combine::Affine => (second.0 * first.0, second.0 * first.1 + second.1),
            Combine::SwappedOrder => (first.0 * second.0, first.0 * second.1 + first.1),
        }
    }
}

/// How lanes are distributed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Lanes {
    #[default]
    Serial,
    /// Spread over the current rayon pool.
    Threaded,
}

pub const DEFAULT_CHUNK: usize = 64;

/// Runs `scan` under the chosen schedule.
pub fn scan<T: Real>(p: &ScanProblem<'_, T>, mode: ScanMode, keep_states: bool, lanes: Lanes) -> Result<ScanOutput<T>> {
    match mode {
        ScanMode::Sequential => scan_sequential(p, keep_states, lanes),
        ScanMode::Parallel => scan_parallel(p, keep_states, lanes, Combine::Affine),
        ScanMode::Chunked => scan_chunked(p, DEFAULT_CHUNK, keep_states, lanes, Combine::Affine),
    }
}

/// Per-lane results: `y[len]` and optional `states[len * state]`.
type LaneOut<T> = (Vec<T>, Vec<T>);

fn run_lanes<T: Real, F>(p: &ScanProblem<'_, T>, keep_states: bool, lanes: Lanes, f: F) -> ScanOutput<T>
where
    F: Fn(usize, usize) -> LaneOut<T> + Sync,
{
    let per_lane = |lane: usize| f(lane / p.channels, lane % p.channels);
    let results: Vec<LaneOut<T>> = match lanes {
        Lanes::Serial => (0..p.lanes()).map(per_lane).collect(),
        Lanes::Threaded => (0..p.lanes()).into_par_iter().map(per_lane).collect(),
    };

    let mut y = vec![T::zero(); p.batch * p.len * p.channels];
    let mut states = keep_states.then(|| vec![T::zero(); y.len() * p.state]);
    for (lane, (ly, ls)) in results.into_iter().enumerate() {
        let (b, d) = (lane / p.channels, lane % p.channels);
        for t in 0..p.len {
            let i = p.seq_idx(b, t, d);
            y[i] = ly[t];
            if let Some(st) = states.as_mut() {
                st[i * p.state..(i + 1) * p.state].copy_from_slice(&ls[t * p.state..(t + 1) * p.state]);
            }
        }
    }
    ScanOutput { y, states }
}

/// Reference schedule: one left-to-right pass per lane.
pub fn scan_sequential<T: Real>(p: &ScanProblem<'_, T>, keep_states: bool, lanes: Lanes) -> Result<ScanOutput<T>> {
    p.validate()?;
    let n_state = p.state;
    Ok(run_lanes(p, keep_states, lanes, |b, d| {
        let mut h = vec![T::zero(); n_state];
        let mut y = vec![T::zero(); p.len];
        let mut hist = if keep_states { vec![T::zero(); p.len * n_state] } else { Vec::new() };
        for t in 0..p.len {
            let crow = &p.c[p.sel_row(b, t)..p.sel_row(b, t) + n_state];
            let mut acc = T::zero();
            for n in 0..n_state {
                let (a_bar, u) = p.element(b, d, t, n);
                h[n] = a_bar * h[n] + u;
                acc = acc + crow[n] * h[n];
            }
            y[t] = acc;
            if keep_states {
                hist[t * n_state..(t + 1) * n_state].copy_from_slice(&h);
            }
        }
        (y, hist)
    }))
}

/// In-place exclusive scan (Blelloch up-sweep / down-sweep) over a
/// power-of-two sized buffer of affine maps.
fn exclusive_tree_scan<T: Real>(elems: &mut [(T, T)], op: Combine) {
    let size = elems.len();
    debug_assert!(size.is_power_of_two());
    let identity = (T::one(), T::zero());
    let mut stride = 1;
    while stride < size {
        let mut i = 2 * stride - 1;
        while i < size {
            elems[i] = op.apply(elems[i - stride], elems[i]);
            i += 2 * stride;
        }
        stride *= 2;
    }
    elems[size - 1] = identity;
    stride = size / 2;
    while stride >= 1 {
        let mut i = 2 * stride - 1;
        while i < size {
            let left = elems[i - stride];
            elems[i - stride] = elems[i];
            elems[i] = op.apply(elems[i], left);
            i += 2 * stride;
        }
        stride /= 2;
    }
}

/// Tree schedule over the full time axis.
pub fn scan_parallel<T: Real>(
    p: &ScanProblem<'_, T>,
    keep_states: bool,
    lanes: Lanes,
    op: Combine,
) -> Result<ScanOutput<T>> {
    p.validate()?;
    let n_state = p.state;
    let padded = p.len.next_power_of_two().max(1);
    Ok(run_lanes(p, keep_states, lanes, |b, d| {
        let mut hist = vec![T::zero(); p.len * n_state];
        let mut orig = vec![(T::one(), T::zero()); p.len];
        let mut buf = vec![(T::one(), T::zero()); padded];
        for n in 0..n_state {
            for t in 0..p.len {
                orig[t] = p.element(b, d, t, n);
                buf[t] = orig[t];
            }
            buf[p.len..].fill((T::one(), T::zero()));
            exclusive_tree_scan(&mut buf, op);
            for t in 0..p.len {
                // inclusive prefix applied to the zero initial state
                hist[t * n_state + n] = op.apply(buf[t], orig[t]).1;
            }
        }
        let y = readout(p, b, &hist);
        (y, if keep_states { hist } else { Vec::new() })
    }))
}

fn readout<T: Real>(p: &ScanProblem<'_, T>, b: usize, hist: &[T]) -> Vec<T> {
    (0..p.len)
        .map(|t| {
            let crow = &p.c[p.sel_row(b, t)..p.sel_row(b, t) + p.state];
            let h = &hist[t * p.state..(t + 1) * p.state];
            crow.iter().zip(h).fold(T::zero(), |acc, (&c, &h)| acc + c * h)
        })
        .collect()
}

/// Hybrid schedule: chunk summaries are combined with the tree scan, then
/// each chunk replays its recurrence from the carried-in state.
pub fn scan_chunked<T: Real>(
    p: &ScanProblem<'_, T>,
    chunk: usize,
    keep_states: bool,
    lanes: Lanes,
    op: Combine,
) -> Result<ScanOutput<T>> {
    p.validate()?;
    if chunk == 0 {
        return Err(Error::Config("scan chunk size must be positive".into()));
    }
    let n_state = p.state;
    let n_chunks = p.len.div_ceil(chunk);
    let padded = n_chunks.next_power_of_two().max(1);
    Ok(run_lanes(p, keep_states, lanes, |b, d| {
        let mut y = vec![T::zero(); p.len];
        let mut hist = if keep_states { vec![T::zero(); p.len * n_state] } else { Vec::new() };
        // carries[n][k]: state entering chunk k
        let mut carries = vec![vec![T::zero(); n_chunks]; n_state];
        let mut summary = vec![(T::one(), T::zero()); padded];
        // [len, state] discretized elements, reused by the replay
        let mut elems = Vec::with_capacity(p.len * n_state);
        for t in 0..p.len {
            elems.extend((0..n_state).map(|n| p.element(b, d, t, n)));
        }
        for (n, carry) in carries.iter_mut().enumerate() {
            summary.fill((T::one(), T::zero()));
            for (k, s) in summary.iter_mut().take(n_chunks).enumerate() {
                let mut acc = (T::one(), T::zero());
                for t in k * chunk..((k + 1) * chunk).min(p.len) {
                    acc = op.apply(acc, elems[t * n_state + n]);
                }
                *s = acc;
            }
            exclusive_tree_scan(&mut summary, op);
            for k in 0..n_chunks {
                carry[k] = summary[k].1;
            }
        }
        let mut h = vec![T::zero(); n_state];
        for k in 0..n_chunks {
            for (n, hn) in h.iter_mut().enumerate() {
                *hn = carries[n][k];
            }
            for t in k * chunk..((k + 1) * chunk).min(p.len) {
                let crow = &p.c[p.sel_row(b, t)..p.sel_row(b, t) + n_state];
                let mut acc = T::zero();
                for n in 0..n_state {
                    let (a_bar, u) = elems[t * n_state + n];
                    h[n] = a_bar * h[n] + u;
                    acc = acc + crow[n] * h[n];
                }
                y[t] = acc;
                if keep_states {
                    hist[t * n_state..(t + 1) * n_state].copy_from_slice(&h);
                }
            }
        }
        (y, hist)
    }))
}

/// Gradients of a scan with respect to each of its inputs.
#[derive(Clone, Debug)]
pub struct ScanGrads {
    pub x: Vec<f64>,
    pub delta: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

/// Reverse-time adjoint recurrence of the scan. `states` is the history
/// returned by any forward schedule; the gradient is schedule-independent.
pub fn scan_backward(p: &ScanProblem<'_, f64>, states: &[f64], gy: &[f64]) -> Result<ScanGrads> {
    p.validate()?;
    let n_state = p.state;
    if states.len() != p.x.len() * n_state || gy.len() != p.x.len() {
        return Err(Error::Data("scan_backward: state history or gradient has wrong size".into()));
    }
    let mut g = ScanGrads {
        x: vec![0.0; p.x.len()],
        delta: vec![0.0; p.delta.len()],
        a: vec![0.0; p.a.len()],
        b: vec![0.0; p.b.len()],
        c: vec![0.0; p.c.len()],
    };
    let mut carry = vec![0.0; n_state];
    for b in 0..p.batch {
        for d in 0..p.channels {
            carry.fill(0.0);
            for t in (0..p.len).rev() {
                let i = p.seq_idx(b, t, d);
                let row = p.sel_row(b, t);
                let (dt, xv, gyv) = (p.delta[i], p.x[i], gy[i]);
                let mut g_dt = 0.0;
                let mut g_x = 0.0;
                for n in 0..n_state {
                    let a = p.a[d * n_state + n];
                    let bn = p.b[row + n];
                    let h = states[i * n_state + n];
                    let h_prev = if t > 0 { states[(i - p.channels) * n_state + n] } else { 0.0 };
                    let gh = carry[n] + p.c[row + n] * gyv;
                    g.c[row + n] += gyv * h;

                    let z = dt * a;
                    let a_bar = z.exp();
                    let (phi, slope) = zoh_gain_and_slope(z);
                    let b_bar = phi * dt * bn;
                    let g_abar = gh * h_prev;
                    let g_bbar = gh * xv;

                    g_x += gh * b_bar;
                    g_dt += g_abar * a * a_bar + g_bbar * bn * a_bar;
                    g.a[d * n_state + n] += g_abar * dt * a_bar + g_bbar * bn * dt * dt * slope;
                    g.b[row + n] += g_bbar * dt * phi;
                    carry[n] = gh * a_bar;
                }
                g.x[i] += g_x;
                g.delta[i] += g_dt;
            }
        }
    }
    Ok(g)
}
