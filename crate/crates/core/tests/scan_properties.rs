use duet::gradcheck::{check, DEFAULT_STEP};
use duet::kernels::{max_rel_diff, scan_chunked, scan_parallel, scan_sequential, zoh, Combine, Lanes, ScanMode, ScanProblem};
use duet::ssm::{random_problem, selective_scan};
use duet::Parameter;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn problem(seed: u64, batch: usize, len: usize, d: usize, n: usize) -> duet::ssm::RandomProblem {
    random_problem(&mut ChaCha8Rng::seed_from_u64(seed), batch, len, d, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn schedules_agree_with_sequential(
        seed in 0u64..10_000,
        batch in 1usize..3,
        len in 1usize..300,
        d in 1usize..6,
        n in 1usize..9,
        chunk in 1usize..80,
    ) {
        let rp = problem(seed, batch, len, d, n);
        let p = rp.view();
        let want = scan_sequential(&p, false, Lanes::Serial).unwrap().y;
        let par = scan_parallel(&p, false, Lanes::Serial, Combine::Affine).unwrap().y;
        let chk = scan_chunked(&p, chunk, false, Lanes::Serial, Combine::Affine).unwrap().y;
        prop_assert!(max_rel_diff(&par, &want, 1e-8) <= 1e-10);
        prop_assert!(max_rel_diff(&chk, &want, 1e-8) <= 1e-10);
    }

    #[test]
    fn output_before_a_perturbation_is_unchanged(seed in 0u64..10_000, len in 2usize..150, at in 0usize..150, bump in -3.0f64..3.0) {
        let at = at % len;
        let rp = problem(seed, 1, len, 3, 4);
        let mut moved = rp.clone();
        moved.x[at * 3 + 1] += bump;
        for f in [
            |p: &ScanProblem<'_, f64>| scan_sequential(p, false, Lanes::Serial).unwrap().y,
            |p: &ScanProblem<'_, f64>| scan_chunked(p, 16, false, Lanes::Serial, Combine::Affine).unwrap().y,
            |p: &ScanProblem<'_, f64>| scan_parallel(p, false, Lanes::Serial, Combine::Affine).unwrap().y,
        ] {
            let (y0, y1) = (f(&rp.view()), f(&moved.view()));
            prop_assert_eq!(&y0[..at * 3], &y1[..at * 3]);
        }
    }

    #[test]
    fn lane_threading_does_not_change_results(seed in 0u64..10_000, len in 1usize..200) {
        let rp = problem(seed, 2, len, 5, 3);
        let p = rp.view();
        for (a, b) in [
            (scan_sequential(&p, true, Lanes::Serial).unwrap(), scan_sequential(&p, true, Lanes::Threaded).unwrap()),
            (scan_chunked(&p, 8, true, Lanes::Serial, Combine::Affine).unwrap(), scan_chunked(&p, 8, true, Lanes::Threaded, Combine::Affine).unwrap()),
        ] {
            prop_assert_eq!(a.y, b.y);
            prop_assert_eq!(a.states, b.states);
        }
    }
}

#[test]
fn states_stay_bounded_over_long_runs() {
    let (len, d, n) = (65_536, 2, 4);
    let rp = problem(3, 1, len, d, n);
    let x_max = rp.x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    // Bound per (channel, state) lane from the worst ā and |b̄| over time.
    let mut bound = vec![0.0f64; d * n];
    for t in 0..len {
        for c in 0..d {
            for s in 0..n {
                let (a_bar, b_bar) = zoh(rp.a[c * n + s], rp.b[t * n + s], rp.delta[t * d + c]);
                let i = c * n + s;
                bound[i] = bound[i].max(b_bar.abs() * x_max / (1.0 - a_bar));
            }
        }
    }
    let out = scan_chunked(&rp.view(), 64, true, Lanes::Serial, Combine::Affine).unwrap();
    assert!(out.y.iter().all(|v| v.is_finite()));
    for (k, h) in out.states.unwrap().iter().enumerate() {
        let i = k % (d * n);
        assert!(h.abs() <= bound[i] * (1.0 + 1e-9), "state {k}: {h} exceeds {}", bound[i]);
    }
}

#[test]
fn scan_gradients_match_finite_differences_in_every_mode() {
    let rp = problem(9, 2, 9, 3, 2);
    let ln_delta: Vec<f64> = rp.delta.iter().map(|v| v.ln()).collect();
    let probe = problem(10, 2, 9, 3, 2).x;
    for mode in [ScanMode::Sequential, ScanMode::Parallel, ScanMode::Chunked] {
        let x = Parameter::new("x", rp.x.clone(), &[2, 9, 3]).unwrap();
        // Δ is parameterized through its log so perturbations keep it positive.
        let log_delta = Parameter::new("log_delta", ln_delta.clone(), &[2, 9, 3]).unwrap();
        let a = Parameter::new("a", rp.a.clone(), &[3, 2]).unwrap();
        let b = Parameter::new("b", rp.b.clone(), &[2, 9, 2]).unwrap();
        let c = Parameter::new("c", rp.c.clone(), &[2, 9, 2]).unwrap();
        let w = duet::Tensor::from_vec(probe.clone(), &[2, 9, 3]).unwrap();
        let report = check(&[&x, &log_delta, &a, &b, &c], DEFAULT_STEP, || {
            let y = selective_scan(&x.tensor(), &log_delta.tensor().exp(), &a.tensor(), &b.tensor(), &c.tensor(), mode)?;
            Ok(y.mul(&w)?.sum_all())
        })
        .unwrap();
        assert!(report.passes(1e-4), "{mode:?}: {report:?}");
    }
}
