//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so the lines always reach the terminal.

mod common;

use std::time::Instant;

use heat_kernel::autodiff::{Activation, MlpSpec, Tensor};
use heat_kernel::cli::{gan2d, run_validate, svgd_bnn, svgd_gauss, toy1d, BnnRunConfig, Gan2dConfig, SvgdGaussConfig, Toy1dConfig};
use heat_kernel::genmodel::{kernel_objective_rbf, mmd2, Estimator, GanConfig};
use heat_kernel::hklearn::{HeatKernelLearner, HkConfig, MeasureMode};
use heat_kernel::kernels::{gram, DeepRbfKernel, RandomFeatureConfig, RandomFeatureKernel};
use heat_kernel::transport::{cost_matrix, exact_ot_small, sinkhorn, DiscreteMeasure, SinkhornConfig};
use heat_kernel::Result;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Result<Outcome> {
    Ok(Outcome { passed, detail })
}

fn toy_recovery() -> Result<Outcome> {
    let t0 = Instant::now();
    let r = toy1d(&Toy1dConfig::default(), 0)?;
    let secs = t0.elapsed().as_secs_f64();
    let first = r.checkpoints.iter().find(|c| c.iteration == 1).expect("iteration 1 checkpoint");
    let last = r.checkpoints.iter().find(|c| c.iteration == 50).expect("iteration 50 checkpoint");
    let passed = last.l2 < first.l2 && last.mse <= 2.5e-3 && (last.t - 0.5).abs() < 1e-12 && secs <= 120.0;
    outcome(
        passed,
        format!(
            "l2 {:.4} -> {:.4}, mse at t={} {:.3e} (<= 2.5e-3), {secs:.1}s",
            first.l2, last.l2, last.t, last.mse
        ),
    )
}

fn sinkhorn_correctness() -> Result<Outcome> {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0_f64;
    for _ in 0..50 {
        let (n, m) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let d = rng.random_range(1..=3);
        let x = common::random_matrix(n, d, 2.0, &mut rng);
        let y = common::random_matrix(m, d, 2.0, &mut rng);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
        let b: Vec<f64> = (0..m).map(|_| rng.random_range(0.05..1.0)).collect();
        let (a, b) = (DiscreteMeasure::normalized(&a)?, DiscreteMeasure::normalized(&b)?);
        let c = cost_matrix(&x, &y)?;
        let exact = exact_ot_small(&a, &b, &c)?;
        let s = sinkhorn(&a, &b, &c, &SinkhornConfig::relative(1e-3, 20_000, 1e-12))?;
        worst = worst.max((s.distance - exact).abs() / exact.max(1e-12));
    }
    let secs = t0.elapsed().as_secs_f64();
    outcome(worst <= 0.02, format!("worst relative error {worst:.3e} (<= 2e-2), {secs:.2}s"))
}

fn gradient_integrity() -> Result<Outcome> {
    let mut worst = (String::new(), 0.0_f64);
    let mut cases = 0;
    for seed in 0..3 {
        for (name, err) in common::gradient_suite(seed) {
            cases += 1;
            // NaN counts as worst.
            if err.is_nan() || err > worst.1 {
                worst = (name, err);
            }
        }
    }
    outcome(
        worst.1 <= 1e-4,
        format!("{cases} checks, worst {:.3e} ({}) (<= 1e-4)", worst.1, worst.0),
    )
}

fn min_eigenvalue(g: &Tensor) -> f64 {
    let n = g.rows();
    let m = DMatrix::from_fn(n, n, |i, j| g.get(i, j));
    m.symmetric_eigen().eigenvalues.min()
}

fn psd() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut rbf_min, mut rf_min) = (f64::INFINITY, f64::INFINITY);
    for _ in 0..100 {
        let n = rng.random_range(2..=32);
        let d = rng.random_range(1..=4);
        let x = common::random_matrix(n, d, 3.0, &mut rng);
        let k = DeepRbfKernel::new(MlpSpec::new(vec![d, 16, 4], Activation::Tanh), None, &mut rng)?;
        rbf_min = rbf_min.min(min_eigenvalue(&gram(&k, &x, &x, false)?.values));
        let cfg = RandomFeatureConfig {
            feature_hidden: vec![16],
            ..RandomFeatureConfig::new(d, 4)
        };
        let k = RandomFeatureKernel::new(&cfg, &mut rng)?;
        rf_min = rf_min.min(min_eigenvalue(&gram(&k, &x, &x, false)?.values));
    }
    outcome(
        rbf_min >= -1e-6 && rf_min >= -1e-6,
        format!("min eigenvalue deep rbf {rbf_min:.3e}, random feature {rf_min:.3e} (>= -1e-6)"),
    )
}

fn mmd_gan_reduction() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0_f64;
    for est in [Estimator::Biased, Estimator::Unbiased] {
        for _ in 0..25 {
            let d = rng.random_range(1..=4);
            let k = DeepRbfKernel::new(MlpSpec::new(vec![d, 12, 3], Activation::Tanh), None, &mut rng)?;
            let x = common::random_matrix(rng.random_range(2..=20), d, 2.0, &mut rng);
            let y = common::random_matrix(rng.random_range(2..=20), d, 2.0, &mut rng);
            let cfg = GanConfig {
                gamma1: 4.0,
                lambda: 4.0,
                estimator: est,
                ..GanConfig::zero_weights()
            };
            let o = kernel_objective_rbf(&k, &x, &y, None, &cfg)?;
            worst = worst.max((o + mmd2(&k, &x, &y, est)?).abs());
        }
    }
    outcome(worst <= 1e-9, format!("worst |objective + mmd^2| {worst:.3e} (<= 1e-9)"))
}

fn jko_descent() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // Noisy circle: a one-dimensional manifold in the plane.
    let x = Tensor::from_fn(48, 2, |i, j| {
        let a = 2.0 * std::f64::consts::PI * i as f64 / 48.0;
        (if j == 0 { a.cos() } else { a.sin() }) + 0.01 * ((i * 7 + j * 3) % 5) as f64
    });
    let mut worst = f64::NEG_INFINITY;
    let mut steps = 0;
    for mode in [MeasureMode::Normalized, MeasureMode::UniformInit, MeasureMode::Unnormalized] {
        let k = DeepRbfKernel::new(MlpSpec::new(vec![2, 16, 16, 4], Activation::Tanh), None, &mut rng)?;
        let cfg = HkConfig {
            outer_steps: 20,
            inner_opt_steps: 5,
            measure_mode: mode,
            adam: heat_kernel::autodiff::AdamConfig::with_lr(1e-2),
            ..HkConfig::default()
        };
        let mut learner = HeatKernelLearner::new(k, cfg)?;
        learner.run(&x, &mut rng)?;
        for e in &learner.trajectory.entries {
            worst = worst.max(e.objective - e.objective_start);
            steps += 1;
        }
    }
    outcome(
        steps == 60 && worst <= 1e-9,
        format!("{steps} outer steps over 3 measure modes, worst end - start {worst:.3e} (<= 1e-9)"),
    )
}

fn svgd_quality() -> Result<Outcome> {
    let t0 = Instant::now();
    let runs = svgd_gauss(&SvgdGaussConfig::default(), 0)?;
    let secs = t0.elapsed().as_secs_f64();
    let mut passed = secs <= 60.0;
    let mut parts = Vec::new();
    for (s, _, _) in &runs {
        passed &= s.mean.abs() <= 0.2 && (0.5..=1.5).contains(&s.variance);
        parts.push(format!("{} mean {:+.3} var {:.3}", s.method, s.mean, s.variance));
    }
    passed &= runs.len() == 2;
    outcome(passed, format!("{}, {secs:.1}s", parts.join(", ")))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn bnn_regression() -> Result<Outcome> {
    let t0 = Instant::now();
    let cfg = BnnRunConfig::default();
    let (mut plain, mut learned) = (Vec::new(), Vec::new());
    for seed in 0..10 {
        for r in svgd_bnn(&cfg, seed)? {
            match r.method.as_str() {
                "svgd" => plain.push(r.rmse),
                _ => learned.push(r.rmse),
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    let (p, l) = (median(plain), median(learned));
    outcome(
        l <= 1.05 * p && secs <= 600.0,
        format!("median rmse hk-svgd {l:.4} vs svgd {p:.4}, ratio {:.4} (<= 1.05), {secs:.0}s", l / p),
    )
}

fn generative_2d() -> Result<Outcome> {
    let t0 = Instant::now();
    let cfg = Gan2dConfig::default();
    let (s, _, samples) = gan2d(&cfg, 0)?;
    let secs = t0.elapsed().as_secs_f64();
    let passed = s.divergence.is_none()
        && samples.rows() == 1000
        && cfg.gan.generator_steps == 2000
        && s.min_coverage >= 0.02
        && s.heldout_mmd2 <= 0.05
        && secs <= 600.0;
    outcome(
        passed,
        format!(
            "min mode share {:.3} (>= 0.02), held-out mmd^2 {:.4} (<= 0.05), {secs:.0}s",
            s.min_coverage, s.heldout_mmd2
        ),
    )
}

fn oracle_suite() -> Result<Outcome> {
    let t0 = Instant::now();
    let r = run_validate();
    let failed: Vec<&str> = r.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    let secs = t0.elapsed().as_secs_f64();
    let detail = if failed.is_empty() {
        format!("{} checks, {secs:.2}s", r.checks.len())
    } else {
        format!("failing: {}", failed.join("; "))
    };
    outcome(failed.is_empty(), detail)
}

type Criterion = (&'static str, fn() -> Result<Outcome>);

fn main() {
    let criteria: [Criterion; 10] = [
        ("toy 1-D heat kernel recovery", toy_recovery),
        ("sinkhorn vs exact OT", sinkhorn_correctness),
        ("gradient integrity", gradient_integrity),
        ("gram matrices are PSD", psd),
        ("MMD-GAN reduction", mmd_gan_reduction),
        ("per-step JKO descent", jko_descent),
        ("SVGD on a 1-D Gaussian", svgd_quality),
        ("BNN regression", bnn_regression),
        ("2-D generative model", generative_2d),
        ("oracle suite", oracle_suite),
    ];
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let (passed, detail) = match run() {
            Ok(o) => (o.passed, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if !passed {
            failures += 1;
        }
        println!("{} criterion {:>2} {name}: {detail}", if passed { "PASS" } else { "FAIL" }, i + 1);
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failures, criteria.len());
    if failures > 0 {
        std::process::exit(1);
    }
}
