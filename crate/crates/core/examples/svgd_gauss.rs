//! Ten particles started at N(5, 1) move to a standard Gaussian, once with
//! the median-bandwidth RBF kernel and once with a kernel learned alongside
//! the particles.

use heat_kernel::cli::{svgd_gauss, SvgdGaussConfig};

fn main() -> heat_kernel::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    for (s, particles, _) in svgd_gauss(&SvgdGaussConfig::default(), seed)? {
        let mut xs: Vec<f64> = particles.particles().data().to_vec();
        xs.sort_by(f64::total_cmp);
        let xs: Vec<String> = xs.iter().map(|v| format!("{v:+.2}")).collect();
        println!(
            "{:<8} mean {:+.3}  variance {:.3}  ({:.1}s)\n         {}",
            s.method,
            s.mean,
            s.variance,
            s.wallclock_s,
            xs.join(" ")
        );
    }
    Ok(())
}
