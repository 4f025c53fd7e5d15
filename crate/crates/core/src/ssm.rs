//! Selective state-space layer built on the scan kernels.

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::{self, Lanes, ScanMode, ScanProblem};
use crate::nn::{LayerNorm, Linear};
use crate::param::{Module, ParamFactory, Parameter};
use crate::tensor::Tensor;

pub const DEFAULT_STATE: usize = 16;

/// Range of the initial step sizes, sampled log-uniformly per channel.
const DT_MIN: f64 = 1e-3;
const DT_MAX: f64 = 0.1;

/// Scalar ZOH discretization, `(ā, b̄)`.
pub fn discretize_zoh(a: f64, b: f64, delta: f64) -> (f64, f64) {
    kernels::zoh(a, b, delta)
}

/// Differentiable selective scan.
///
/// `x`, `delta`: `[Bt, L, D]`; `a`: `[D, N]`; `b`, `c`: `[Bt, L, N]`.
/// Returns `y[Bt, L, D]`.
pub fn selective_scan(x: &Tensor, delta: &Tensor, a: &Tensor, b: &Tensor, c: &Tensor, mode: ScanMode) -> Result<Tensor> {
    let (bt, len, d) = match x.shape() {
        [bt, l, d] => (*bt, *l, *d),
        s => return Err(Error::shape("selective_scan", s, delta.shape())),
    };
    if delta.shape() != x.shape() {
        return Err(Error::shape("selective_scan delta", x.shape(), delta.shape()));
    }
    let n = match a.shape() {
        [ad, n] if *ad == d => *n,
        s => return Err(Error::shape("selective_scan A", x.shape(), s)),
    };
    for t in [b, c] {
        if t.shape() != [bt, len, n] {
            return Err(Error::shape("selective_scan B/C", &[bt, len, n], t.shape()));
        }
    }
    let record = Tensor::should_record(&[x, delta, a, b, c]);
    let out = {
        let p = ScanProblem {
            batch: bt,
            len,
            channels: d,
            state: n,
            x: x.data(),
            delta: delta.data(),
            a: a.data(),
            b: b.data(),
            c: c.data(),
        };
        kernels::scan(&p, mode, record, Lanes::Serial)?
    };
    let states = out.states.unwrap_or_default();
    let parents = vec![x.clone(), delta.clone(), a.clone(), b.clone(), c.clone()];
    let inputs = parents.clone();
    Ok(Tensor::from_op(
        "selective_scan",
        out.y,
        vec![bt, len, d],
        parents,
        Box::new(move |gy| {
            let [x, delta, a, b, c] = &inputs[..] else { unreachable!() };
            let p = ScanProblem {
                batch: bt,
                len,
                channels: d,
                state: n,
                x: x.data(),
                delta: delta.data(),
                a: a.data(),
                b: b.data(),
                c: c.data(),
            };
            let g = kernels::scan_backward(&p, &states, gy).expect("shapes validated in forward");
            vec![Some(g.x), Some(g.delta), Some(g.a), Some(g.b), Some(g.c)]
        }),
    ))
}

/// Input-dependent SSM parameters for one sequence batch.
#[derive(Clone, Debug)]
pub struct SelectiveParams {
    /// `[Bt, L, N]`
    pub b: Tensor,
    /// `[Bt, L, N]`
    pub c: Tensor,
    /// `[Bt, L, D]`, strictly positive
    pub delta: Tensor,
}

/// Learnable state matrix, step bias and selective projections of one
/// SSM over `D` channels with `N` states per channel.
#[derive(Debug)]
pub struct SsmCore {
    /// `A = −exp(log_a)`, `[D, N]`
    pub log_a: Parameter,
    /// Step-size bias `[D]`
    pub p: Parameter,
    pub proj_b: Linear,
    pub proj_c: Linear,
    pub dt_norm: LayerNorm,
    pub proj_dt: Linear,
    pub mode: ScanMode,
}

impl SsmCore {
    pub fn new(f: &ParamFactory, d: usize, n: usize, mode: ScanMode) -> Result<Self> {
        if d == 0 || n == 0 {
            return Err(Error::Config(format!("ssm widths must be positive, got D={d} N={n}")));
        }
        let log_a: Vec<f64> = (0..d).flat_map(|_| (1..=n).map(|k| (k as f64).ln())).collect();
        let p: Vec<f64> = f
            .uniform(d, DT_MIN.ln(), DT_MAX.ln())
            .into_iter()
            .map(|u| inverse_softplus(u.exp()))
            .collect();
        Ok(Self {
            log_a: f.param_from("log_a", log_a, &[d, n])?,
            p: f.param_from("p", p, &[d])?,
            proj_b: Linear::new(&f.pp("proj_b"), d, n)?,
            proj_c: Linear::new(&f.pp("proj_c"), d, n)?,
            dt_norm: LayerNorm::new(&f.pp("dt_norm"), d)?,
            proj_dt: Linear::new(&f.pp("proj_dt"), d, 1)?,
            mode,
        })
    }

    pub fn channels(&self) -> usize {
        self.log_a.shape()[0]
    }

    pub fn state(&self) -> usize {
        self.log_a.shape()[1]
    }

    /// The continuous-time diagonal `A`, strictly negative.
    pub fn a(&self) -> Tensor {
        self.log_a.tensor().exp().neg()
    }

    pub fn project(&self, x: &Tensor) -> Result<SelectiveParams> {
        if x.rank() != 3 || x.dim(2) != self.channels() {
            return Err(Error::shape("project_selective_params", x.shape(), &self.log_a.shape()));
        }
        let b = self.proj_b.forward(x)?;
        let c = self.proj_c.forward(x)?;
        let step = self.proj_dt.forward(&self.dt_norm.forward(x)?)?;
        let delta = step.add(&self.p.tensor())?.softplus();
        Ok(SelectiveParams { b, c, delta })
    }

    /// Scan driven by `x` with parameters from `params`.
    pub fn scan_with(&self, x: &Tensor, params: &SelectiveParams) -> Result<Tensor> {
        selective_scan(x, &params.delta, &self.a(), &params.b, &params.c, self.mode)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.mssm(x, x)
    }

    /// Mix-SSM: selective parameters from `h_inter`, recurrence input from
    /// `x_query`.
    pub fn mssm(&self, x_query: &Tensor, h_inter: &Tensor) -> Result<Tensor> {
        if x_query.shape() != h_inter.shape() {
            return Err(Error::shape("mssm", x_query.shape(), h_inter.shape()));
        }
        let params = self.project(h_inter)?;
        self.scan_with(x_query, &params)
    }
}

impl Module for SsmCore {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Parameter)) {
        f(&self.log_a);
        f(&self.p);
        self.proj_b.visit_params(f);
        self.proj_c.visit_params(f);
        self.dt_norm.visit_params(f);
        self.proj_dt.visit_params(f);
    }
}

pub fn project_selective_params(x: &Tensor, core: &SsmCore) -> Result<SelectiveParams> {
    core.project(x)
}

pub fn mssm(x_query: &Tensor, h_inter: &Tensor, core: &SsmCore) -> Result<Tensor> {
    core.mssm(x_query, h_inter)
}

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Random problem data for tests and benchmarks: `A` in `[−N, −0.5]`,
/// `Δ` in `[1e-3, 0.5]`, everything else in `[−1, 1]`.
pub fn random_problem<R: Rng + ?Sized>(rng: &mut R, batch: usize, len: usize, d: usize, n: usize) -> RandomProblem {
    let mut u = |count: usize, lo: f64, hi: f64| -> Vec<f64> { (0..count).map(|_| rng.random_range(lo..hi)).collect() };
    RandomProblem {
        batch,
        len,
        d,
        n,
        x: u(batch * len * d, -1.0, 1.0),
        delta: u(batch * len * d, 1e-3, 0.5),
        a: u(d * n, -(n as f64), -0.5),
        b: u(batch * len * n, -1.0, 1.0),
        c: u(batch * len * n, -1.0, 1.0),
    }
}

/// Owned scan inputs.
#[derive(Clone, Debug)]
pub struct RandomProblem {
    pub batch: usize,
    pub len: usize,
    pub d: usize,
    pub n: usize,
    pub x: Vec<f64>,
    pub delta: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

impl RandomProblem {
    pub fn view(&self) -> ScanProblem<'_, f64> {
        ScanProblem {
            batch: self.batch,
            len: self.len,
            channels: self.d,
            state: self.n,
            x: &self.x,
            delta: &self.delta,
            a: &self.a,
            b: &self.b,
            c: &self.c,
        }
    }

    pub fn to_f32(&self) -> [Vec<f32>; 5] {
        let cast = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
        [cast(&self.x), cast(&self.delta), cast(&self.a), cast(&self.b), cast(&self.c)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::no_grad;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct evaluation of the recurrence with the discretization written out.
    fn loop_oracle(p: &RandomProblem) -> Vec<f64> {
        let mut y = vec![0.0; p.batch * p.len * p.d];
        for b in 0..p.batch {
            for d in 0..p.d {
                let mut h = vec![0.0; p.n];
                for t in 0..p.len {
                    let i = (b * p.len + t) * p.d + d;
                    let mut acc = 0.0;
                    for n in 0..p.n {
                        let a = p.a[d * p.n + n];
                        let dt = p.delta[i];
                        let bn = p.b[(b * p.len + t) * p.n + n];
                        let a_bar = (dt * a).exp();
                        let b_bar = ((dt * a).exp() - 1.0) / (dt * a) * dt * bn;
                        h[n] = a_bar * h[n] + b_bar * p.x[i];
                        acc += p.c[(b * p.len + t) * p.n + n] * h[n];
                    }
                    y[i] = acc;
                }
            }
        }
        y
    }

    fn tensors(p: &RandomProblem) -> [Tensor; 5] {
        [
            Tensor::from_vec(p.x.clone(), &[p.batch, p.len, p.d]).unwrap(),
            Tensor::from_vec(p.delta.clone(), &[p.batch, p.len, p.d]).unwrap(),
            Tensor::from_vec(p.a.clone(), &[p.d, p.n]).unwrap(),
            Tensor::from_vec(p.b.clone(), &[p.batch, p.len, p.n]).unwrap(),
            Tensor::from_vec(p.c.clone(), &[p.batch, p.len, p.n]).unwrap(),
        ]
    }

    #[test]
    fn single_step_example() {
        // b̄ = 2 at a = 0 needs Δ·b = 2; C = 0.5, x = 3 → y = 3
        let t = |v: f64, s: &[usize]| Tensor::from_vec(vec![v], s).unwrap();
        let y = selective_scan(&t(3.0, &[1, 1, 1]), &t(1.0, &[1, 1, 1]), &t(0.0, &[1, 1]), &t(2.0, &[1, 1, 1]), &t(0.5, &[1, 1, 1]), ScanMode::Sequential).unwrap();
        assert_eq!(y.data(), &[3.0]);
    }

    #[test]
    fn all_modes_match_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = random_problem(&mut rng, 2, 64, 4, 16);
        let want = loop_oracle(&p);
        let [x, dt, a, b, c] = tensors(&p);
        for mode in [ScanMode::Sequential, ScanMode::Parallel, ScanMode::Chunked] {
            let y = selective_scan(&x, &dt, &a, &b, &c, mode).unwrap();
            for (g, w) in y.data().iter().zip(&want) {
                assert!((g - w).abs() <= 1e-10 * w.abs().max(1.0), "{mode:?}: {g} vs {w}");
            }
        }
    }

    #[test]
    fn two_step_hand_value() {
        let (a, dt) = (-1.0f64, 0.5);
        let (x1, x2, b1, b2, c2) = (1.0, -2.0, 0.3, 0.8, 1.5);
        let a_bar = (dt * a).exp();
        let phi = (dt * a).exp_m1() / (dt * a);
        let h1 = phi * dt * b1 * x1;
        let h2 = a_bar * h1 + phi * dt * b2 * x2;
        let t = |v: Vec<f64>, s: &[usize]| Tensor::from_vec(v, s).unwrap();
        for mode in [ScanMode::Sequential, ScanMode::Parallel] {
            let y = selective_scan(
                &t(vec![x1, x2], &[1, 2, 1]),
                &t(vec![dt, dt], &[1, 2, 1]),
                &t(vec![a], &[1, 1]),
                &t(vec![b1, b2], &[1, 2, 1]),
                &t(vec![1.0, c2], &[1, 2, 1]),
                mode,
            )
            .unwrap();
            assert!((y.data()[1] - c2 * h2).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_projections_give_constant_step() {
        let f = ParamFactory::new(4);
        let core = SsmCore::new(&f, 3, 4, ScanMode::Chunked).unwrap();
        for p in [&core.proj_b, &core.proj_c, &core.proj_dt] {
            for prm in p.parameters() {
                prm.fill(0.0);
            }
        }
        core.p.fill(0.0);
        let x = Tensor::randn(&[2, 5, 3], &mut ChaCha8Rng::seed_from_u64(0));
        let sp = core.project(&x).unwrap();
        assert!(sp.b.data().iter().chain(sp.c.data()).all(|&v| v == 0.0));
        assert!(sp.delta.data().iter().all(|&v| (v - std::f64::consts::LN_2).abs() < 1e-15));
        assert_eq!(sp.delta.shape(), &[2, 5, 3]);
    }

    #[test]
    fn initial_state_matrix_spans_one_to_n() {
        let core = SsmCore::new(&ParamFactory::new(0), 2, 4, ScanMode::Chunked).unwrap();
        let want = [-1.0, -2.0, -3.0, -4.0, -1.0, -2.0, -3.0, -4.0];
        for (a, w) in core.a().data().iter().zip(want) {
            assert!((a - w).abs() < 1e-14);
        }
        let softplus_p: Vec<f64> = core.p.to_vec().iter().map(|&p| crate::tensor::softplus(p)).collect();
        assert!(softplus_p.iter().all(|&d| (DT_MIN * 0.999..=DT_MAX * 1.001).contains(&d)));
    }

    #[test]
    fn mssm_reductions() {
        let f = ParamFactory::new(9);
        let core = SsmCore::new(&f, 4, 3, ScanMode::Chunked).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[2, 7, 4], &mut rng);
        let inter = Tensor::randn(&[2, 7, 4], &mut rng);
        let _g = no_grad();
        assert_eq!(core.mssm(&x, &x).unwrap().data(), core.forward(&x).unwrap().data());
        let zero = Tensor::zeros(&[2, 7, 4]);
        assert!(core.mssm(&zero, &inter).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(core.mssm(&x, &Tensor::zeros(&[2, 6, 4])).is_err());
    }

    #[test]
    fn mssm_matches_mixed_loop_oracle() {
        let f = ParamFactory::new(5);
        let core = SsmCore::new(&f, 3, 2, ScanMode::Parallel).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[1, 9, 3], &mut rng);
        let inter = Tensor::randn(&[1, 9, 3], &mut rng);
        let sp = core.project(&inter).unwrap();
        let p = RandomProblem {
            batch: 1,
            len: 9,
            d: 3,
            n: 2,
            x: x.to_vec(),
            delta: sp.delta.to_vec(),
            a: core.a().to_vec(),
            b: sp.b.to_vec(),
            c: sp.c.to_vec(),
        };
        let want = loop_oracle(&p);
        let got = core.mssm(&x, &inter).unwrap();
        for (g, w) in got.data().iter().zip(&want) {
            assert!((g - w).abs() < 1e-12 * w.abs().max(1.0));
        }
    }
}
