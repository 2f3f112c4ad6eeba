//! Bayesian neural network regression on a noisy sinusoid with plain SVGD
//! and with a learned kernel on the output layer. Pass the number of seeds
//! as the first argument.

use heat_kernel::cli::{svgd_bnn, BnnRunConfig};

fn main() -> heat_kernel::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2);
    let cfg = BnnRunConfig::default();
    println!("{:>4} {:<8} {:>8} {:>9} {:>7}", "seed", "method", "rmse", "test ll", "time");
    for seed in 0..seeds {
        for r in svgd_bnn(&cfg, seed)? {
            println!(
                "{:>4} {:<8} {:>8.4} {:>9.4} {:>6.1}s",
                r.seed, r.method, r.rmse, r.test_ll, r.wallclock_s
            );
        }
    }
    Ok(())
}
