//! Learns the heat kernel of the real line from 512 uniform samples and
//! compares the rescaled learned kernel with the closed form at each
//! checkpoint. Pass a seed as the first argument.

use heat_kernel::cli::{toy1d, Toy1dConfig};

fn main() -> heat_kernel::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let r = toy1d(&Toy1dConfig::default(), seed)?;
    println!("{:>9} {:>6} {:>10} {:>10}", "iteration", "t", "l2", "mse");
    for c in &r.checkpoints {
        println!("{:>9} {:>6.2} {:>10.4} {:>10.3e}", c.iteration, c.t, c.l2, c.mse);
    }
    let last = r.checkpoints.last().expect("at least one checkpoint");
    println!("\n{:>6} {:>10} {:>10}", "x", "learned", "oracle");
    for i in (0..last.grid.len()).step_by(50) {
        println!("{:>6.2} {:>10.5} {:>10.5}", last.grid[i], last.learned[i], last.oracle[i]);
    }
    Ok(())
}
