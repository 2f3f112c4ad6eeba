//! Entropic optimal transport between two small point clouds, against the
//! exact linear-programming value, for a range of regularization strengths.

use heat_kernel::autodiff::Tensor;
use heat_kernel::transport::{cost_matrix, exact_ot_small, sinkhorn, DiscreteMeasure, SinkhornConfig};

fn main() -> heat_kernel::Result<()> {
    let x = Tensor::matrix(4, 2, vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0])?;
    let y = Tensor::matrix(3, 2, vec![0.5, 0.2, 2.0, 1.0, -0.5, 1.5])?;
    let a = DiscreteMeasure::normalized(&[1.0, 2.0, 1.0, 1.0])?;
    let b = DiscreteMeasure::uniform(3)?;
    let c = cost_matrix(&x, &y)?;
    let exact = exact_ot_small(&a, &b, &c)?;
    println!("exact W2^2 = {exact:.6}");
    println!("{:>10} {:>12} {:>10} {:>8}", "eps/mean", "sinkhorn", "rel err", "iters");
    for rel in [1e-1, 1e-2, 1e-3] {
        let s = sinkhorn(&a, &b, &c, &SinkhornConfig::relative(rel, 50_000, 1e-12))?;
        println!(
            "{rel:>10.0e} {:>12.6} {:>10.2e} {:>8}",
            s.distance,
            (s.distance - exact).abs() / exact,
            s.iterations
        );
    }
    Ok(())
}
