//! Batch size warmup against fixed small- and large-batch controls.
//!
//! Doubling points are read off a measured critical batch size curve, then
//! the three arms train from the same initialization with a shared learning
//! rate schedule that anneals to zero over the final stretch.
//!
//! ```bash
//! cargo run --release --example warmup_arms
//! ```

use std::collections::BTreeMap;

use critbatch::cbs_meter::{measure_cbs_curve, CurvePoint, SweepConfig, SweepTemplate};
use critbatch::engine::{train, BatchSchedule, Checkpoint, TrainSpec};
use critbatch::optim::{OptimizerKind, LrSchedule, ScalingRule};
use critbatch::tasks::{QuadraticTask, QuadraticTaskSpec};
use critbatch::warmup::{build_arms, report_csv, run_arms, thresholds_from_curve, ArmRunConfig, WarmupPlan};

fn main() -> critbatch::Result<()> {
    let task = QuadraticTask::new(
        QuadraticTaskSpec {
            hessian_diag: vec![1.0, 0.5, 0.25, 0.1],
            noise_cov_diag: vec![0.05; 4],
            ..QuadraticTaskSpec::isotropic(4, 1.0, 0.05)
        }
        .with_init(vec![4.0; 4]),
    )?;
    let total = 40_000;
    let base_lr = 0.05;

    // Measure the curve on a base run at batch 4.
    let lr = LrSchedule::constant(base_lr, total + 1_024);
    let schedule = BatchSchedule::constant(4, 1.0)?;
    let init = Checkpoint::fresh(&task, OptimizerKind::Sgd, 7)?;
    let mut state = init.clone();
    let mut checkpoints = BTreeMap::new();
    for target in [0, 1_000, 2_500, 5_000, 10_000, 20_000] {
        if target > state.tokens_seen {
            let spec = TrainSpec::new(&schedule, &lr, target - state.tokens_seen);
            state = train(&task, state, &spec)?.1;
        }
        checkpoints.insert(target, state.clone());
    }
    let positions: Vec<u64> = checkpoints.keys().copied().collect();
    let mut sweep = SweepConfig::new(vec![0.5, 1.0, 2.0, 4.0, 8.0, 16.0], 4, 1_024, ScalingRule::Linear);
    sweep.replicas = 2;
    let template = SweepTemplate { base: sweep, groups: Vec::new() };
    let curve: Vec<CurvePoint> = measure_cbs_curve(&task, &checkpoints, &positions, &template, &lr)?
        .iter()
        .map(CurvePoint::from)
        .collect();
    for p in &curve {
        println!("cbs ≥ {:>4} at {:>6} tokens", p.interval.lower, p.checkpoint_tokens);
    }

    let plan = WarmupPlan {
        initial_batch: 2,
        initial_lr: base_lr,
        rule: ScalingRule::Linear,
        thresholds: thresholds_from_curve(&curve, 2, 4)?,
        lr_warmup_tokens: 0,
    };
    println!("\nplan:\n{}", plan.to_toml()?);

    let arms = build_arms(&plan, total, 8_000)?;
    let config = ArmRunConfig { report_window: 1_000, replicas: 2, ..ArmRunConfig::default() };
    let results = run_arms(&task, &init, &arms, &config)?;
    print!("{}", String::from_utf8_lossy(&report_csv(&results)?));
    Ok(())
}
