//! Closed-form heat kernels and the theory-side checks, as run by
//! `hk validate`.

use heat_kernel::cli::run_validate;
use heat_kernel::oracles::{heat_kernel_line, varadhan_residual, AnalyticKernel};

fn main() -> heat_kernel::Result<()> {
    let circle = AnalyticKernel::Circle { radius: 1.0 };
    println!("{:>6} {:>12} {:>12}", "t", "line(0,1)", "circle(0,1)");
    for t in [0.05, 0.5, 5.0] {
        println!("{t:>6} {:>12.6} {:>12.6}", heat_kernel_line(t, 0.0, 1.0)?, circle.eval(t, 0.0, 1.0)?);
    }
    // -4t log k approaches the squared distance as t shrinks.
    for t in [0.1, 0.01, 0.001] {
        let r = varadhan_residual(heat_kernel_line, |a, b| (a - b).abs(), t, 0.0, 0.5)?;
        println!("varadhan residual at t = {t}: {r:.3e}");
    }
    print!("{}", run_validate().table());
    Ok(())
}
