//! The two learnable kernel families on a handful of points: Gram matrices,
//! their smallest eigenvalue and the effect of spectral normalization.

use heat_kernel::autodiff::{Activation, MlpSpec, Tensor};
use heat_kernel::kernels::{gram, spectral_normalize, DeepRbfKernel, RandomFeatureConfig, RandomFeatureKernel};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn show(name: &str, g: &Tensor) {
    println!("{name}:");
    for row in g.row_vecs() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:7.4}")).collect();
        println!("  {}", cells.join(" "));
    }
}

fn main() -> heat_kernel::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::matrix(4, 2, vec![0.0, 0.0, 0.5, 0.1, -1.0, 0.8, 2.0, -1.5])?;

    let rbf = DeepRbfKernel::new(MlpSpec::new(vec![2, 16, 4], Activation::Tanh), None, &mut rng)?;
    show("deep rbf gram", &gram(&rbf, &x, &x, false)?.values);

    let rf = RandomFeatureKernel::new(&RandomFeatureConfig::new(2, 4), &mut rng)?;
    show("random feature gram", &gram(&rf, &x, &x, false)?.values);

    let w = Tensor::matrix(2, 2, vec![3.0, 1.0, 0.0, 2.0])?;
    let s = spectral_normalize(&w, 50)?;
    println!("spectral norm estimate {:.6}; normalized weight {:?}", s.sigma, s.weight.row_vecs());
    Ok(())
}
