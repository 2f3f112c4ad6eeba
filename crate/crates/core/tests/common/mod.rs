//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use heat_kernel::autodiff::{gradcheck, Activation, MlpSpec, Tape, Tensor, Var};
use heat_kernel::genmodel::{kernel_objective_op, mmd2_op, smmd2_op, Estimator, GanConfig};
use heat_kernel::hklearn::{hk_objective_op, kde_weights, neg_entropy_op, EntropyEstimator, HkConfig, MeasureSnapshot};
use heat_kernel::kernels::{DeepRbfKernel, Kernel, RandomFeatureConfig, RandomFeatureKernel};
use heat_kernel::transport::{sinkhorn_op, DiscreteMeasure, SinkhornConfig};
use heat_kernel::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-6;

pub fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
}

pub fn deep_rbf(widths: Vec<usize>, rng: &mut impl Rng) -> DeepRbfKernel {
    DeepRbfKernel::new(MlpSpec::new(widths, Activation::Tanh), None, rng).unwrap()
}

pub fn random_feature(input_dim: usize, rng: &mut impl Rng) -> RandomFeatureKernel {
    let cfg = RandomFeatureConfig {
        feature_hidden: vec![5],
        noise_dim: 2,
        freq_hidden: vec![4],
        num_freq_samples: 6,
        ..RandomFeatureConfig::new(input_dim, 3)
    };
    RandomFeatureKernel::new(&cfg, rng).unwrap()
}

/// Inputs `[x, y, params...]`: the parameters come last so `&vars[2..]`
/// binds them.
fn with_params<K: Kernel>(kernel: &K, x: &Tensor, y: &Tensor) -> Vec<Tensor> {
    let mut v = vec![x.clone(), y.clone()];
    v.extend(kernel.store().iter().map(|(_, p)| p.value.clone()));
    v
}

fn weighted_sum(tape: &mut Tape, m: Var, w: &Tensor) -> Result<Var> {
    let w = tape.leaf(w.clone())?;
    let t = tape.mul(m, w)?;
    tape.sum(t)
}

fn check(name: &str, build: impl Fn(&mut Tape, &[Var]) -> Result<Var>, inputs: &[Tensor]) -> (String, f64) {
    let err = gradcheck(build, inputs, FD_STEP)
        .map(|g| g.max_rel_error)
        .unwrap_or(f64::INFINITY);
    (name.to_string(), err)
}

fn exact_sinkhorn() -> SinkhornConfig {
    // No early stop, so the unrolled map is the same function under every
    // perturbation.
    SinkhornConfig::absolute(0.3, 200, 0.0)
}

/// Worst relative error between reverse-mode and central-difference
/// gradients for every differentiable building block.
pub fn gradient_suite(seed: u64) -> Vec<(String, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rbf = deep_rbf(vec![2, 6, 3], &mut rng);
    let rf = random_feature(2, &mut rng);
    let x = random_matrix(4, 2, 1.0, &mut rng);
    let y = random_matrix(3, 2, 1.0, &mut rng);
    let w43 = random_matrix(4, 3, 1.0, &mut rng);
    let w4 = random_matrix(4, 1, 1.0, &mut rng);
    let rbf_in = with_params(&rbf, &x, &y);
    let rf_in = with_params(&rf, &x, &y);
    let mut out = Vec::new();

    out.push(check(
        "deep rbf gram",
        |t, v| {
            let g = rbf.gram(t, &v[2..], v[0], v[1])?;
            weighted_sum(t, g, &w43)
        },
        &rbf_in,
    ));
    out.push(check(
        "random feature gram",
        |t, v| {
            let g = rf.gram(t, &v[2..], v[0], v[1])?;
            weighted_sum(t, g, &w43)
        },
        &rf_in,
    ));
    out.push(check(
        "kde weights",
        |t, v| {
            let g = rbf.gram(t, &v[2..], v[0], v[0])?;
            let mu = kde_weights(t, g)?;
            weighted_sum(t, mu, &w4)
        },
        &rbf_in,
    ));
    for (name, est) in [
        ("entropy plugin A", EntropyEstimator::PluginA),
        ("entropy plugin B", EntropyEstimator::PluginB),
    ] {
        out.push(check(
            name,
            |t, v| {
                let g = rbf.gram(t, &v[2..], v[0], v[0])?;
                let mu = kde_weights(t, g)?;
                neg_entropy_op(t, mu, g, est)
            },
            &rbf_in,
        ));
    }

    let a = DiscreteMeasure::normalized(&[0.3, 0.5, 0.9, 0.4]).unwrap();
    let b = DiscreteMeasure::normalized(&[0.7, 0.2, 0.6]).unwrap();
    let (a, b) = (Tensor::column(a.weights()), Tensor::column(b.weights()));
    let cost = Tensor::from_fn(4, 3, |_, _| rng.random_range(0.1..2.0));
    out.push(check(
        "sinkhorn in weights and cost",
        |t, v| sinkhorn_op(t, v[0], v[1], v[2], &exact_sinkhorn()),
        &[a.clone(), b.clone(), cost],
    ));
    out.push(check(
        "sinkhorn in support points",
        |t, v| {
            let (wa, wb) = (t.leaf(a.clone())?, t.leaf(b.clone())?);
            let c = t.sq_dist(v[0], v[1])?;
            sinkhorn_op(t, wa, wb, c, &exact_sinkhorn())
        },
        &[x.clone(), y.clone()],
    ));

    for (name, est) in [("mmd biased", Estimator::Biased), ("mmd unbiased", Estimator::Unbiased)] {
        out.push(check(name, |t, v| mmd2_op(t, &rbf, &v[2..], v[0], v[1], est), &rbf_in));
    }
    out.push(check(
        "smmd",
        |t, v| smmd2_op(t, &rbf, &v[2..], v[0], v[1], 1.0, Estimator::Unbiased),
        &rbf_in,
    ));

    let hk = HkConfig {
        lambda: 0.5,
        sinkhorn: exact_sinkhorn(),
        ..HkConfig::default()
    };
    let nu = [0.1, 0.2, 0.3, 0.4];
    let xc = heat_kernel::transport::cost_matrix(&x, &x).unwrap();
    out.push(check(
        "heat kernel objective",
        |t, v| Ok(hk_objective_op(t, &rbf, &v[2..], v[0], &nu, xc.values(), None, &hk)?.total),
        &rbf_in,
    ));

    let snapshot = MeasureSnapshot::new(
        DiscreteMeasure::normalized(&[0.2, 0.5, 0.3, 0.6, 0.1, 0.4, 0.8]).unwrap(),
        random_matrix(7, 2, 1.0, &mut rng),
    )
    .unwrap();
    let full = GanConfig {
        alpha: 0.3,
        beta: 0.2,
        lambda: 1.5,
        gamma1: 0.7,
        gamma2: 0.4,
        gamma3: 0.5,
        gamma4: 0.3,
        scale_kernel_objective: true,
        sinkhorn: exact_sinkhorn(),
        estimator: Estimator::Unbiased,
        ..GanConfig::default()
    };
    out.push(check(
        "generative kernel objective, deep rbf",
        |t, v| Ok(kernel_objective_op(t, &rbf, &v[2..], v[0], v[1], Some(&snapshot), &full)?.total),
        &rbf_in,
    ));
    let dk = GanConfig {
        alpha: 0.3,
        lambda: 1.0,
        gamma1: 0.5,
        gamma3: 0.5,
        gamma5: 0.2,
        ..GanConfig::zero_weights()
    };
    out.push(check(
        "generative kernel objective, random features",
        |t, v| Ok(kernel_objective_op(t, &rf, &v[2..], v[0], v[1], None, &dk)?.total),
        &rf_in,
    ));
    out
}
