//! Two-batch gradient noise scale on a quadratic whose true value is known.
//!
//! ```bash
//! cargo run --release --example noise_scale
//! ```

use critbatch::noise_scale::{collect_pairs, estimate, DEFAULT_B_BIG, DEFAULT_B_SMALL, DEFAULT_N_PAIRS};
use critbatch::rng::RngStream;
use critbatch::tasks::{analytic_noise_scale, QuadraticTask, QuadraticTaskSpec, Task};

fn main() -> critbatch::Result<()> {
    let spec = QuadraticTaskSpec {
        hessian_diag: vec![2.0, 1.0, 0.5, 0.25],
        noise_cov_diag: vec![0.5, 1.0, 1.5, 2.0],
        ..QuadraticTaskSpec::isotropic(4, 1.0, 1.0)
    };
    let task = QuadraticTask::new(spec.clone())?;

    println!("{:>8} {:>10} {:>10} {:>22}", "offset", "true", "estimate", "95% interval");
    for offset in [0.25, 0.5, 1.0, 2.0] {
        let params = vec![offset; task.dimension()];
        let truth = analytic_noise_scale(&spec, &params)?;
        let rng = RngStream::from_seed(42).child_u64("offset", (offset * 100.0) as u64);
        let pairs = collect_pairs(&task, &params, DEFAULT_B_SMALL, DEFAULT_B_BIG, DEFAULT_N_PAIRS, &rng)?;
        let est = estimate(&pairs)?;
        println!(
            "{offset:>8} {truth:>10.4} {:>10.4} [{:>9.4}, {:>9.4}]",
            est.b_simple, est.ci_low, est.ci_high
        );
    }
    // Closer to the optimum the mean gradient shrinks while the noise does
    // not, so the noise scale grows.
    Ok(())
}
