use duet::diffusion::{cfg_combine, cosine_schedule, forward_noise, DEFAULT_OFFSET};
use duet::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #[test]
    fn cosine_schedule_is_strictly_decreasing(steps in 2usize..3000) {
        let s = cosine_schedule(steps, DEFAULT_OFFSET).unwrap();
        prop_assert_eq!(s.alpha_bar.len(), steps + 1);
        prop_assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        prop_assert!(s.alpha_bar[0] == 1.0 && s.alpha_bar[steps] > 0.0);
    }

    #[test]
    fn guidance_is_affine_in_weight(
        pc in prop::collection::vec(-5.0f64..5.0, 6),
        pu in prop::collection::vec(-5.0f64..5.0, 6),
        w1 in -2.0f64..8.0,
        w2 in -2.0f64..8.0,
        lam in -1.0f64..2.0,
    ) {
        let (pc, pu) = (Tensor::from_vec(pc, &[6]).unwrap(), Tensor::from_vec(pu, &[6]).unwrap());
        let f = |w: f64| cfg_combine(&pc, &pu, w).unwrap().to_vec();
        let mid = f(lam * w1 + (1.0 - lam) * w2);
        let (a, b) = (f(w1), f(w2));
        for i in 0..6 {
            let want = lam * a[i] + (1.0 - lam) * b[i];
            prop_assert!((mid[i] - want).abs() <= 1e-10 * (1.0 + want.abs()));
        }
    }
}

#[test]
fn forward_noise_variance_contract() {
    let n = 100_000;
    let sched = cosine_schedule(1000, DEFAULT_OFFSET).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for (t, x_std) in [(50, 1.0), (400, 1.0), (800, 1.0), (300, 2.0)] {
        let x0 = Tensor::randn(&[n], &mut rng).mul_scalar(x_std);
        let eps = Tensor::randn(&[n], &mut rng);
        let y = forward_noise(&x0, t, &eps, &sched).unwrap();
        let ab = sched.alpha_bar[t];
        let var = |d: &[f64]| {
            let m = d.iter().sum::<f64>() / n as f64;
            d.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64
        };
        // Against the realized input variance, so only the noise is random.
        let want = ab * var(x0.data()) + (1.0 - ab);
        let got = var(y.data());
        assert!((got - want).abs() <= 0.02 * want, "t={t}: {got} vs {want}");
    }
}
