//! The whole protocol through the library's orchestration layer: base run,
//! sweep, noise scale, warmup comparison and curve analysis, with every
//! artifact written to a run store.
//!
//! ```bash
//! cargo run --release --example full_pipeline            # temporary store
//! cargo run --release --example full_pipeline -- ./out   # keep the files
//! ```

use std::path::PathBuf;

use critbatch::pipeline::{analyze_curve_file, Pipeline};
use critbatch::runstore::RunStore;
use critbatch::scaling_laws::{CurveFamily, FitTarget};

const CONFIG: &str = include_str!("../configs/quadratic.toml");

fn main() -> anyhow::Result<()> {
    let temp = tempfile::tempdir()?;
    let root = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| temp.path().to_owned());
    let store = RunStore::open(&root)?;
    let pipeline = Pipeline::new(store.clone(), CONFIG, None)?.force(true);

    let trained = pipeline.train()?;
    println!("trained {} to {} tokens", trained.run_id, trained.final_tokens);

    let (curve, curve_path) = pipeline.sweep(&[])?;
    let (noise, _) = pipeline.noise(&[])?;
    println!("\n{:>8} {:>10} {:>12}", "tokens", "cbs ≥", "B_simple");
    for (m, (_, est)) in curve.iter().zip(&noise) {
        println!("{:>8} {:>10} {:>12.2}", m.checkpoint_tokens, m.interval.lower, est.b_simple);
    }

    let warm = pipeline.warmup(None)?;
    println!("\nwarmup doubles at {:?}", warm.plan.thresholds);
    for r in &warm.results {
        println!("{:<12} loss {:.6} in {} steps", r.kind.name(), r.final_mt_loss, r.grad_steps);
    }

    let horizon = 4.0 * pipeline.config().train.token_budget as f64;
    let (report, _) = analyze_curve_file(&store, &trained.run_id, &curve_path, CurveFamily::Power, FitTarget::Lower, horizon, true)?;
    println!(
        "\npower fit c = {:.3}; best fixed batch for {horizon} tokens ≈ {:.1}",
        report.c.unwrap_or(f64::NAN),
        report.predicted_average_cbs
    );
    println!("\nartifacts under {}", root.display());
    Ok(())
}
