//! Trains a generator on the eight-Gaussian ring with a learned heat kernel
//! as the critic, then reports the share of samples near each mode.

use heat_kernel::cli::{gan2d, Gan2dConfig};

fn main() -> heat_kernel::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let (summary, run, _) = gan2d(&Gan2dConfig::default(), seed)?;
    for line in run.metrics_csv().lines().step_by(8) {
        println!("{line}");
    }
    let shares: Vec<String> = summary.mode_coverage.iter().map(|c| format!("{c:.3}")).collect();
    println!("mode shares: {}", shares.join(" "));
    println!("held-out MMD^2: {:.4} ({:.1}s)", summary.heldout_mmd2, summary.wallclock_s);
    if let Some(d) = summary.divergence {
        println!("stopped early: {d}");
    }
    Ok(())
}
