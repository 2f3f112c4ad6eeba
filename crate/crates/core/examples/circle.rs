//! Heat kernel learning on points from a circle embedded in the plane. On a
//! compact manifold diffusion spreads until the kernel is flat, so the
//! learned `k(0, .)` is printed against arc length as the outer steps go by.

use heat_kernel::autodiff::{Activation, AdamConfig, Init, MlpSpec, Tensor};
use heat_kernel::hklearn::{HeatKernelLearner, HkConfig};
use heat_kernel::kernels::{eval, DeepRbfKernel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;

fn main() -> heat_kernel::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let n = 96;
    let point = |a: f64| [a.cos(), a.sin()];
    let x = Tensor::from_fn(n, 2, |i, j| point(2.0 * PI * i as f64 / n as f64)[j]);
    let mut spec = MlpSpec::new(vec![2, 32, 32, 2], Activation::Relu);
    spec.init = Init::HeUniform;
    let mut kernel = DeepRbfKernel::new(spec, None, &mut rng)?;
    kernel.calibrate_width(&x, 0.3)?;
    let cfg = HkConfig {
        lambda: 4.0,
        outer_steps: 30,
        inner_opt_steps: 1,
        adam: AdamConfig::with_lr(1e-3),
        ..HkConfig::default()
    };
    let mut learner = HeatKernelLearner::new(kernel, cfg)?;
    let arcs = [0.25, 0.5, 1.0, 2.0, PI];
    let header: Vec<String> = arcs.iter().map(|a| format!("{a:>7.3}")).collect();
    println!("k(0, .) by arc length\n{:>5} {:>10} {}", "step", "objective", header.join(" "));
    for step in 0..=30 {
        if step > 0 {
            learner.step(&x, &mut rng)?;
        }
        if [0, 1, 2, 5, 10, 20, 30].contains(&step) {
            let k: Vec<String> = arcs
                .iter()
                .map(|&a| eval(&learner.kernel, &point(0.0), &point(a)).map(|v| format!("{v:>7.4}")))
                .collect::<heat_kernel::Result<_>>()?;
            let obj = learner.trajectory.entries.last().map_or(f64::NAN, |e| e.objective);
            println!("{step:>5} {obj:>10.4} {}", k.join(" "));
        }
    }
    Ok(())
}
