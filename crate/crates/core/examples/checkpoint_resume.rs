//! Interrupting a run and resuming from a saved checkpoint reproduces the
//! uninterrupted run bit for bit.
//!
//! ```bash
//! cargo run --example checkpoint_resume
//! ```

use critbatch::engine::{load_checkpoint, save_checkpoint, train, BatchSchedule, Checkpoint, TrainSpec};
use critbatch::optim::{AdamHyper, LrSchedule, OptimizerKind};
use critbatch::tasks::{Activation, MlpTask, MlpTaskSpec};

fn main() -> anyhow::Result<()> {
    let task = MlpTask::new(MlpTaskSpec {
        layer_widths: vec![16],
        activation: Activation::Tanh,
        data_seed: 11,
        input_dim: 8,
        num_classes: 4,
        label_support: 2,
        tokens_per_example: 1,
    })?;
    let schedule = BatchSchedule::constant(8, 1.0)?;
    let lr = LrSchedule::cosine(0.01, 800, 16_000);
    let fresh = Checkpoint::fresh(&task, OptimizerKind::Adam(AdamHyper::default()), 5)?;

    let (full_log, full_end) = train(&task, fresh.clone(), &TrainSpec::new(&schedule, &lr, 16_000))?;

    let dir = tempfile::tempdir()?;
    let path = dir.path().join("ckpt_8000.bin");
    let (mut log, halfway) = train(&task, fresh, &TrainSpec::new(&schedule, &lr, 8_000))?;
    save_checkpoint(&halfway, &path)?;
    let restored = load_checkpoint(&path)?;
    let (rest, end) = train(&task, restored, &TrainSpec::new(&schedule, &lr, 8_000))?;
    log.extend(rest);

    println!("steps: {} uninterrupted, {} resumed", full_log.len(), log.len());
    println!("final smoothed loss: {:?} vs {:?}", full_end.smoothed_loss, end.smoothed_loss);
    println!("checkpoint size: {} bytes", std::fs::metadata(&path)?.len());
    anyhow::ensure!(log == full_log && end == full_end, "resumed run diverged from the original");
    println!("identical logs and final state");
    Ok(())
}
