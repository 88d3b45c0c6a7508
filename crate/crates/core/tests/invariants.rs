use aotnse::assimilation::Interpolant;
use aotnse::forcing::{generate_forcing, ForcingSpec};
use aotnse::recovery::{estimate_instant, estimate_windowed, Window};
use aotnse::spectrum::shell_sums;
use aotnse::{random_field, Cutoff, Grid2D, Workspace};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn grid(n: usize) -> Grid2D<f64> {
    Grid2D::new(n).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn advection_is_energy_neutral(seed in any::<u64>(), decay in 0.0f64..2.0, n in prop::sample::select(vec![16usize, 32])) {
        let g = grid(n);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = random_field(&g, &mut rng, None, decay);
        let w = random_field(&g, &mut rng, None, decay);
        let b = Workspace::new(&g).bilinear(&u, &w).unwrap();
        let scale = u.h1_norm() * w.l2_norm().powi(2);
        prop_assert!(b.inner(&w).abs() <= 1e-10 * scale);
        prop_assert!(b.max_divergence() <= 1e-12 * b.coeff_norm().max(1.0));
        prop_assert!(b.hermitian_defect() <= 1e-12 * b.coeff_norm().max(1.0));
    }

    #[test]
    fn interpolant_error_bound(seed in any::<u64>(), inv_h in 2.0f64..32.0, decay in 0.0f64..3.0) {
        let g = grid(64);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phi = random_field(&g, &mut rng, None, decay);
        let h = 1.0 / inv_h;
        let tail = phi.sub(&phi.observe(&Cutoff::from_h(h).unwrap()).unwrap());
        prop_assert!(tail.l2_norm() <= h * tail.h1_norm() * (1.0 + 1e-12));
        prop_assert!(tail.l2_norm() <= h * phi.h1_norm() * (1.0 + 1e-12));
    }

    #[test]
    fn observation_is_a_projection(seed in any::<u64>(), inv_h in 1.0f64..16.0) {
        let g = grid(32);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phi = random_field(&g, &mut rng, None, 0.5);
        let c = Cutoff::from_h(1.0 / inv_h).unwrap();
        let once = phi.observe(&c).unwrap();
        let twice = once.observe(&c).unwrap();
        prop_assert_eq!(once.sub(&twice).max_abs(), 0.0);
        let (lo, hi) = (once.l2_norm(), phi.sub(&once).l2_norm());
        prop_assert!((lo * lo + hi * hi - phi.l2_norm().powi(2)).abs() <= 1e-12 * phi.l2_norm().powi(2));
    }

    #[test]
    fn shell_sums_partition_the_energy(seed in any::<u64>()) {
        let g = grid(32);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // shells reach |k| = n/2, so keep the corners empty
        let u = random_field(&g, &mut rng, Some(15.0), 1.0);
        let total: f64 = shell_sums(&u).iter().sum::<f64>() * g.measure();
        let e = u.l2_norm().powi(2);
        prop_assert!((total - e).abs() <= 1e-12 * e);
    }

    #[test]
    fn forcing_norm_and_support(seed in any::<u64>(), target in 0.1f64..10.0) {
        let g = grid(64);
        let spec = ForcingSpec { k_low: 9.0, k_high: 11.0, seed, target_l2: target };
        let f = generate_forcing(&spec, &g).unwrap();
        prop_assert!((f.l2_norm() - target).abs() <= 1e-13 * target);
        prop_assert!(f.max_divergence() <= 1e-12 * f.coeff_norm());
        for i in 0..g.len() {
            let k = g.ksq(i).sqrt();
            if !(k > 9.0 && k < 11.0) {
                prop_assert_eq!(f.at(i)[0].norm() + f.at(i)[1].norm(), 0.0);
            }
        }
    }

    #[test]
    fn instant_estimate_is_the_formula(nu2 in 1e-4f64..1.0, mu in 0.1f64..50.0, q in 1e-12f64..1.0, d in 1e-3f64..10.0) {
        match estimate_instant(nu2, mu, q, d) {
            Ok(est) => prop_assert_eq!(est, nu2 - mu * q / d),
            Err(_) => prop_assert!(d < 1e-3 * mu * q / nu2),
        }
        prop_assert!(estimate_instant(nu2, mu, q, 0.0).is_err());
    }

    #[test]
    fn constant_window_reduces_to_instant(nu2 in 1e-3f64..1.0, mu in 1.0f64..40.0, q in 1e-10f64..1e-2, d in 1e-2f64..1.0, samples in 2usize..50) {
        let mut w = Window::new();
        for i in 0..samples {
            w.push(20.0 + i as f64 * 0.005, Interpolant { ih_err_sq: q, denom: d });
        }
        let a = estimate_windowed(nu2, mu, &w).unwrap();
        let b = estimate_instant(nu2, mu, q, d).unwrap();
        prop_assert!((a - b).abs() <= 1e-10 * b.abs().max(nu2));
    }
}
