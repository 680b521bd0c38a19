//! Measures a critical batch size curve by branched training.
//!
//! A base run on a tiny language model is checkpointed in memory; from each
//! checkpoint, short branches at several batch multipliers show where larger
//! batches stop matching the small-batch loss.
//!
//! ```bash
//! cargo run --release --example branch_sweep
//! ```

use std::collections::BTreeMap;

use critbatch::cbs_meter::{curve_csv, measure_cbs_curve, SweepConfig, SweepTemplate};
use critbatch::engine::{train, BatchSchedule, Checkpoint, TrainSpec};
use critbatch::optim::{AdamHyper, LrSchedule, OptimizerKind, ScalingRule};
use critbatch::tasks::{TinyLmTask, TinyLmTaskSpec};

fn main() -> critbatch::Result<()> {
    let task = TinyLmTask::new(TinyLmTaskSpec {
        vocab_size: 64,
        context_len: 16,
        embed_dim: 16,
        num_layers: 1,
        corpus_seed: 3,
        successors: 2,
    })?;
    let base_batch = 16;
    let window = 32_768;
    let positions = [0, 8_192, 20_480, 51_200, 153_600];
    let lr = LrSchedule::constant(0.003, 153_600 + window);
    let schedule = BatchSchedule::constant(base_batch, 1.0)?;

    let mut state = Checkpoint::fresh(&task, OptimizerKind::Adam(AdamHyper::default()), 1)?;
    let mut checkpoints = BTreeMap::new();
    for &target in &positions {
        if target > state.tokens_seen {
            let spec = TrainSpec::new(&schedule, &lr, target - state.tokens_seen);
            state = train(&task, state, &spec)?.1;
        }
        checkpoints.insert(state.tokens_seen, state.clone());
    }

    let mut sweep = SweepConfig::new(vec![0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0], base_batch, window, ScalingRule::Sqrt);
    sweep.replicas = 4;
    let template = SweepTemplate { base: sweep, groups: Vec::new() };
    let curve = measure_cbs_curve(&task, &checkpoints, &positions, &template, &lr)?;

    for m in &curve {
        let losses: Vec<String> = m.branches.iter().map(|b| format!("{:.3}", b.final_smoothed_loss)).collect();
        println!("{:>7} tokens  k*={:<5} losses by k: {}", m.checkpoint_tokens, m.k_star, losses.join(" "));
    }
    print!("\n{}", String::from_utf8_lossy(&curve_csv(&curve)?));
    Ok(())
}
