mod common;

use heat_kernel::autodiff::Tensor;
use heat_kernel::genmodel::{mmd2, pair_expectation, smmd_sigma, taylor_bound_rbf, Estimator};
use heat_kernel::autodiff::Tape;
use heat_kernel::hklearn::{kde_weights, neg_entropy, normalized_kde, EntropyEstimator};
use heat_kernel::kernels::{eval, RandomFeatureConfig, RandomFeatureKernel};
use heat_kernel::kernels::{gram, spectral_normalize_scaled, DeepRbfKernel};
use heat_kernel::oracles::{heat_kernel_circle, heat_kernel_line};
use heat_kernel::svgd::{rbf_median_kernel, svgd_step, GaussianTarget, ParticleSet};
use heat_kernel::transport::{cost_matrix, exact_ot_small, sinkhorn, DiscreteMeasure, SinkhornConfig};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn kernel(d: usize, rng: &mut ChaCha8Rng) -> DeepRbfKernel {
    common::deep_rbf(vec![d, 8, 3], rng)
}

fn measure(n: usize, rng: &mut ChaCha8Rng) -> DiscreteMeasure {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    DiscreteMeasure::normalized(&raw).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn mmd_of_a_batch_with_itself_is_zero(seed in any::<u64>(), n in 1usize..12, d in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = kernel(d, &mut rng);
        let x = common::random_matrix(n, d, 2.0, &mut rng);
        prop_assert!(mmd2(&k, &x, &x, Estimator::Biased).unwrap().abs() < 1e-12);
    }

    #[test]
    fn biased_mmd_is_non_negative_and_symmetric(seed in any::<u64>(), n in 1usize..10, m in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = kernel(2, &mut rng);
        let x = common::random_matrix(n, 2, 2.0, &mut rng);
        let y = common::random_matrix(m, 2, 2.0, &mut rng);
        let xy = mmd2(&k, &x, &y, Estimator::Biased).unwrap();
        let yx = mmd2(&k, &y, &x, Estimator::Biased).unwrap();
        prop_assert!(xy >= -1e-12);
        prop_assert!((xy - yx).abs() < 1e-12);
    }

    #[test]
    fn deep_rbf_gram_is_symmetric_with_unit_diagonal(seed in any::<u64>(), n in 1usize..16) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = kernel(3, &mut rng);
        let x = common::random_matrix(n, 3, 3.0, &mut rng);
        let g = gram(&k, &x, &x, false).unwrap().values;
        for i in 0..n {
            prop_assert!((g.get(i, i) - 1.0).abs() < 1e-15);
            for j in 0..n {
                prop_assert_eq!(g.get(i, j), g.get(j, i));
                prop_assert!(g.get(i, j) > 0.0 && g.get(i, j) <= 1.0);
            }
        }
    }

    #[test]
    fn pair_expectation_lies_between_kernel_bounds(seed in any::<u64>(), n in 2usize..10, m in 2usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = kernel(2, &mut rng);
        let x = common::random_matrix(n, 2, 2.0, &mut rng);
        let y = common::random_matrix(m, 2, 2.0, &mut rng);
        for est in [Estimator::Biased, Estimator::Unbiased] {
            let e = pair_expectation(&k, &x, &y, est).unwrap();
            prop_assert!(e > 0.0 && e <= 1.0 + 1e-15);
        }
    }

    #[test]
    fn smmd_scale_is_bounded_by_zeta(seed in any::<u64>(), n in 1usize..10, zeta in 0.1f64..5.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = kernel(2, &mut rng);
        let x = common::random_matrix(n, 2, 2.0, &mut rng);
        // k(x, x) = 1 and the cross trace is a squared norm.
        let s = smmd_sigma(&k, &x, zeta).unwrap();
        prop_assert!(s > 0.0 && s <= 1.0 / (1.0 + zeta) + 1e-12);
    }

    #[test]
    fn taylor_bound_is_a_product_of_its_parts(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = kernel(2, &mut rng);
        let x = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        let y = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
        let b = taylor_bound_rbf(&k, &x, &y).unwrap();
        prop_assert!(b.kernel_value > 0.0 && b.kernel_value <= 1.0);
        prop_assert!(b.jacobian_norm >= 0.0 && b.feature_distance >= 0.0);
        let prod = b.kernel_value * b.jacobian_norm * b.feature_distance;
        prop_assert!((b.bound - prod).abs() <= 1e-12 * prod.max(1.0));
    }

    #[test]
    fn normalized_kde_is_a_probability_vector(seed in any::<u64>(), n in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = kernel(2, &mut rng);
        let x = common::random_matrix(n, 2, 4.0, &mut rng);
        let mu = normalized_kde(&k, &x).unwrap();
        prop_assert!((mu.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(mu.weights().iter().all(|w| *w > 0.0));
    }

    #[test]
    fn sinkhorn_plan_has_the_requested_marginals(seed in any::<u64>(), n in 1usize..8, m in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = common::random_matrix(n, 2, 2.0, &mut rng);
        let y = common::random_matrix(m, 2, 2.0, &mut rng);
        let (a, b) = (measure(n, &mut rng), measure(m, &mut rng));
        let c = cost_matrix(&x, &y).unwrap();
        // Cost ranges far above eps contract slowly, hence the generous budget.
        let s = sinkhorn(&a, &b, &c, &SinkhornConfig::relative(0.05, 200_000, 1e-12)).unwrap();
        prop_assert!(s.converged);
        for i in 0..n {
            let row: f64 = (0..m).map(|j| s.plan.get(i, j)).sum();
            prop_assert!((row - a.weights()[i]).abs() < 1e-8);
        }
        for j in 0..m {
            let col: f64 = (0..n).map(|i| s.plan.get(i, j)).sum();
            prop_assert!((col - b.weights()[j]).abs() < 1e-8);
        }
        // A feasible plan never beats the exact optimum.
        let exact = exact_ot_small(&a, &b, &c).unwrap();
        prop_assert!(s.distance >= exact - 1e-8);
    }

    #[test]
    fn exact_ot_is_symmetric_under_transposition(seed in any::<u64>(), n in 1usize..6, m in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = common::random_matrix(n, 2, 2.0, &mut rng);
        let y = common::random_matrix(m, 2, 2.0, &mut rng);
        let (a, b) = (measure(n, &mut rng), measure(m, &mut rng));
        let c = cost_matrix(&x, &y).unwrap();
        let ab = exact_ot_small(&a, &b, &c).unwrap();
        let ba = exact_ot_small(&b, &a, &c.transpose()).unwrap();
        prop_assert!((ab - ba).abs() < 1e-10);
    }

    #[test]
    fn svgd_with_median_bandwidth_is_translation_equivariant(
        seed in any::<u64>(),
        n in 2usize..10,
        shift in -5.0f64..5.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = common::random_matrix(n, 2, 2.0, &mut rng);
        let moved = Tensor::from_fn(n, 2, |i, j| x.get(i, j) + shift);
        let step = |p: &Tensor, mean: f64| {
            let target = GaussianTarget::new(vec![mean, mean], 1.3).unwrap();
            let k = rbf_median_kernel(p).unwrap();
            svgd_step(&ParticleSet::new(p.clone()).unwrap(), &target, &k, 0.1).unwrap()
        };
        let a = step(&x, 0.5);
        let b = step(&moved, 0.5 + shift);
        for i in 0..n {
            for j in 0..2 {
                let d = b.particles().get(i, j) - a.particles().get(i, j) - shift;
                prop_assert!(d.abs() < 1e-9, "offset {d}");
            }
        }
    }

    #[test]
    fn spectral_normalization_bounds_the_top_singular_value(
        seed in any::<u64>(),
        r in 1usize..8,
        c in 1usize..8,
        scale in 0.5f64..3.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = common::random_matrix(r, c, 3.0, &mut rng);
        let s = spectral_normalize_scaled(&w, 1000, scale).unwrap();
        let m = DMatrix::from_fn(r, c, |i, j| s.weight.get(i, j));
        let top = m.singular_values().max();
        prop_assert!(top <= scale * (1.0 + 1e-3), "top singular value {top}");
    }

    #[test]
    fn analytic_heat_kernels_are_symmetric_and_positive(
        t in 0.01f64..5.0,
        a in -3.0f64..3.0,
        b in -3.0f64..3.0,
    ) {
        let l = heat_kernel_line(t, a, b).unwrap();
        prop_assert!(l > 0.0 || (a - b).powi(2) / (4.0 * t) > 700.0);
        prop_assert_eq!(l, heat_kernel_line(t, b, a).unwrap());
        let c = heat_kernel_circle(t, a, b, 1.0, 64).unwrap();
        let c_swapped = heat_kernel_circle(t, b, a, 1.0, 64).unwrap();
        let c_wrapped = heat_kernel_circle(t, a, b + 2.0 * std::f64::consts::PI, 1.0, 64).unwrap();
        prop_assert!(c > 0.0);
        prop_assert!((c - c_swapped).abs() <= 1e-12 * c.max(1.0));
        prop_assert!((c - c_wrapped).abs() <= 1e-9 * c.max(1.0));
    }

    #[test]
    fn kde_weights_ignore_a_constant_kernel_scale(seed in any::<u64>(), n in 1usize..16, c in 1e-3f64..1e3) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Tensor::from_fn(n, n, |_, _| rng.random_range(0.01..1.0));
        let weights = |scale: f64| {
            let mut t = Tape::new();
            let v = t.leaf(g.map(|k| k * scale)).unwrap();
            let w = kde_weights(&mut t, v).unwrap();
            t.value(w).data().to_vec()
        };
        let (base, scaled, pow2) = (weights(1.0), weights(c), weights(64.0));
        prop_assert_eq!(&base, &pow2);
        for (a, b) in base.iter().zip(&scaled) {
            prop_assert!((a - b).abs() <= 4.0 * f64::EPSILON * a);
        }
    }

    #[test]
    fn plugin_a_entropy_lies_in_its_range(seed in any::<u64>(), n in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = kernel(2, &mut rng);
        let x = common::random_matrix(n, 2, 3.0, &mut rng);
        let mu = normalized_kde(&k, &x).unwrap();
        let h = neg_entropy(mu.weights(), &k, &x, EntropyEstimator::PluginA).unwrap();
        prop_assert!(h >= -(n as f64).ln() - 1e-12 && h <= 1e-12, "{h}");
    }
}

#[test]
fn random_feature_kernel_is_reproducible_per_seed() {
    let build = || {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = RandomFeatureConfig {
            num_freq_samples: 1024,
            ..RandomFeatureConfig::new(1, 4)
        };
        RandomFeatureKernel::new(&cfg, &mut rng).unwrap()
    };
    let (a, b) = (build(), build());
    let va = eval(&a, &[0.3], &[-0.7]).unwrap();
    assert_eq!(va.to_bits(), eval(&b, &[0.3], &[-0.7]).unwrap().to_bits());
    assert!(va.abs() <= 1.0);
    assert!((eval(&a, &[0.3], &[0.3]).unwrap() - 1.0).abs() < 1e-12);
}
