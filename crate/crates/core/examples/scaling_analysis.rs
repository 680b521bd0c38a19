//! Fits growth laws to a critical batch size curve and predicts the best
//! fixed batch size for a longer run.
//!
//! ```bash
//! cargo run --example scaling_analysis
//! ```

use critbatch::cbs_meter::{CbsInterval, CurvePoint};
use critbatch::scaling_laws::{
    analyze, average_cbs_log, average_cbs_numeric, average_cbs_power, grid_minimizer, CurveFamily, FitTarget,
};

fn main() -> critbatch::Result<()> {
    // A curve shaped like sqrt growth, measured on a doubling grid of batch
    // sizes so each lower bound is a power of two.
    let tokens = [1_000u64, 4_000, 16_000, 64_000, 256_000];
    let curve: Vec<CurvePoint> = tokens
        .iter()
        .map(|&t| {
            let lower = 2f64.powf((0.5 * (t as f64).log2()).floor());
            CurvePoint {
                checkpoint_tokens: t,
                k_star: lower / 8.0,
                interval: CbsInterval { lower, upper: Some(2.0 * lower), point: Some(lower * 2f64.sqrt()) },
            }
        })
        .collect();

    let horizon = 1e6;
    for family in [CurveFamily::Power, CurveFamily::Log] {
        let report = analyze(&curve, family, FitTarget::Lower, horizon)?;
        println!("{}", serde_json::to_string_pretty(&report)?);
    }

    // The time average of a curve is the fixed batch size closest to it in L2.
    let f = |t: f64| 3.0 * t.sqrt();
    let numeric = average_cbs_numeric(f, horizon, 100_001)?;
    let closed = 3.0 * average_cbs_power(0.5, horizon);
    let grid = grid_minimizer(f, horizon, 0.5 * closed, 1.5 * closed, 400, 20_001)?;
    println!("average of 3√t up to 1e6: quadrature {numeric:.3}, closed form {closed:.3}, L2 grid minimum {grid:.3}");
    println!("average of ln(1+t) up to 1e6: {:.4}", average_cbs_log(horizon));
    Ok(())
}
