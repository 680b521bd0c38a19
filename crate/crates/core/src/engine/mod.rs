//! Deterministic training loop.
//!
//! [`train`] advances a [`Checkpoint`] under a [`BatchSchedule`] until a
//! token budget is spent, logging one [`LogRecord`] per optimizer step.
//! All arithmetic is `f64` in a fixed order, so training `n + m` steps and
//! training `n`, checkpointing, and resuming for `m` produce identical bits.

mod checkpoint;
mod schedule;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, FORMAT_VERSION, MAGIC};
pub(crate) use checkpoint::write_atomic;
pub use schedule::{BatchSchedule, Segment};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{lr_at, LrSchedule};
use crate::tasks::Task;

pub const DEFAULT_EMA_ALPHA: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    /// Tokens seen after this step.
    pub tokens: u64,
    pub step: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub raw_loss: f64,
    pub smoothed_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<LogRecord>,
}

impl RunLog {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&LogRecord> {
        self.records.last()
    }

    pub fn extend(&mut self, other: RunLog) {
        self.records.extend(other.records);
    }

    pub fn raw_losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.raw_loss).collect()
    }

    /// Mean smoothed loss over records whose token count lies in
    /// `(until − window, until]`, falling back to the last record at or
    /// before `until` when the window holds none.
    pub fn window_mean(&self, until: u64, window: u64) -> Option<f64> {
        let lo = until.saturating_sub(window);
        let (sum, n) = self
            .records
            .iter()
            .filter(|r| r.tokens > lo && r.tokens <= until)
            .fold((0.0, 0usize), |(s, n), r| (s + r.smoothed_loss, n + 1));
        if n > 0 {
            return Some(sum / n as f64);
        }
        self.records
            .iter()
            .rev()
            .find(|r| r.tokens <= until)
            .map(|r| r.smoothed_loss)
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r)?;
        }
        if self.records.is_empty() {
            w.write_record(["tokens", "step", "batch_size", "lr", "raw_loss", "smoothed_loss"])?;
        }
        w.into_inner()
            .map_err(|e| Error::io("<run log>", e.into_error()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_csv()?)
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let records = r.deserialize().collect::<Result<Vec<LogRecord>, _>>()?;
        Ok(Self { records })
    }
}

/// `s₀ = x₀`, `sᵢ = α·xᵢ + (1−α)·sᵢ₋₁`.
pub fn ema_smooth(series: &[f64], alpha: f64) -> Result<Vec<f64>> {
    check_alpha(alpha)?;
    if series.is_empty() {
        return Err(Error::invalid("cannot smooth an empty series"));
    }
    let mut out = Vec::with_capacity(series.len());
    let mut prev = None;
    for &x in series {
        let s = ema_update(prev, x, alpha);
        out.push(s);
        prev = Some(s);
    }
    Ok(out)
}

fn ema_update(prev: Option<f64>, x: f64, alpha: f64) -> f64 {
    match prev {
        None => x,
        Some(s) => alpha * x + (1.0 - alpha) * s,
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::invalid(format!("ema alpha {alpha} must lie in (0, 1]")));
    }
    Ok(())
}

/// Everything about a training call except the starting state.
#[derive(Clone, Debug)]
pub struct TrainSpec<'a> {
    pub schedule: &'a BatchSchedule,
    pub lr_schedule: &'a LrSchedule,
    pub ema_alpha: f64,
    /// Train until `tokens_seen ≥ start + token_budget`.
    pub token_budget: u64,
    /// Raw losses above this abort the run as diverged.
    pub max_loss: Option<f64>,
}

impl<'a> TrainSpec<'a> {
    pub fn new(schedule: &'a BatchSchedule, lr_schedule: &'a LrSchedule, token_budget: u64) -> Self {
        Self {
            schedule,
            lr_schedule,
            ema_alpha: DEFAULT_EMA_ALPHA,
            token_budget,
            max_loss: None,
        }
    }

    pub fn alpha(mut self, alpha: f64) -> Self {
        self.ema_alpha = alpha;
        self
    }

    pub fn max_loss(mut self, max_loss: Option<f64>) -> Self {
        self.max_loss = max_loss;
        self
    }
}

/// A run that stopped early. The log holds every completed step.
#[derive(Debug, thiserror::Error)]
#[error("training aborted after {} steps: {error}", log.len())]
pub struct TrainAbort {
    pub log: RunLog,
    #[source]
    pub error: Error,
}

impl From<TrainAbort> for Error {
    fn from(abort: TrainAbort) -> Self {
        abort.error
    }
}

pub fn train(
    task: &dyn Task,
    init: Checkpoint,
    spec: &TrainSpec<'_>,
) -> std::result::Result<(RunLog, Checkpoint), TrainAbort> {
    let mut log = RunLog::default();
    let abort = |log: RunLog, error: Error| TrainAbort { log, error };
    if let Err(e) = validate(task, &init, spec) {
        return Err(abort(log, e));
    }
    let mut state = init;
    let target = state.tokens_seen.saturating_add(spec.token_budget);
    while state.tokens_seen < target {
        let cursor = spec.schedule.index_at(state.tokens_seen);
        let segment = spec.schedule.segments()[cursor];
        let lr = match lr_at(spec.lr_schedule, state.tokens_seen) {
            Ok(base) => segment.lr_multiplier * base,
            Err(e) => return Err(abort(log, e)),
        };
        let step = (|| {
            let batch = task.sample_batch(&mut state.rng, segment.batch_size)?;
            let (loss, grad) = task.loss_and_grad(&state.params, &batch)?;
            if !loss.is_finite() || spec.max_loss.is_some_and(|m| loss > m) {
                return Err(Error::numeric(format!(
                    "loss {loss} at step {} (tokens {})",
                    state.optimizer.step_count + 1,
                    state.tokens_seen
                )));
            }
            state.optimizer.step(&mut state.params, &grad, lr)?;
            Ok((loss, batch.token_count()))
        })();
        let (loss, tokens) = match step {
            Ok(v) => v,
            Err(e) => return Err(abort(log, e)),
        };
        state.tokens_seen += tokens;
        state.schedule_cursor = cursor;
        let smoothed = ema_update(state.smoothed_loss, loss, spec.ema_alpha);
        state.smoothed_loss = Some(smoothed);
        log.records.push(LogRecord {
            tokens: state.tokens_seen,
            step: state.optimizer.step_count,
            batch_size: segment.batch_size,
            lr,
            raw_loss: loss,
            smoothed_loss: smoothed,
        });
    }
    Ok((log, state))
}

fn validate(task: &dyn Task, init: &Checkpoint, spec: &TrainSpec<'_>) -> Result<()> {
    if spec.token_budget == 0 {
        return Err(Error::invalid("token budget must be positive"));
    }
    check_alpha(spec.ema_alpha)?;
    spec.lr_schedule.validate()?;
    init.check_task(task)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::{AdamHyper, OptimizerKind};
    use crate::tasks::{QuadraticTask, QuadraticTaskSpec};

    fn quad(noise: f64) -> QuadraticTask {
        QuadraticTask::new(QuadraticTaskSpec::isotropic(4, 1.0, noise)).unwrap()
    }

    #[test]
    fn ema_examples() {
        assert_eq!(ema_smooth(&[3.0; 5], 0.5).unwrap(), vec![3.0; 5]);
        let xs = [1.0, -2.0, 7.5];
        assert_eq!(ema_smooth(&xs, 1.0).unwrap(), xs.to_vec());
        assert_eq!(ema_smooth(&[0.0, 1.0, 1.0], 0.5).unwrap(), vec![0.0, 0.5, 0.75]);
        assert!(ema_smooth(&[1.0], 0.0).is_err());
        assert!(ema_smooth(&[1.0], 1.5).is_err());
        assert!(ema_smooth(&[], 0.5).is_err());
    }

    #[test]
    fn noiseless_descent_is_strictly_decreasing() {
        let task = quad(0.0);
        let ckpt = Checkpoint::fresh(&task, OptimizerKind::Sgd, 1).unwrap();
        let schedule = BatchSchedule::constant(2, 1.0).unwrap();
        let lr = LrSchedule::constant(0.1, 1_000);
        let (log, end) = train(&task, ckpt, &TrainSpec::new(&schedule, &lr, 100)).unwrap();
        assert_eq!(log.len(), 50);
        assert_eq!(end.tokens_seen, 100);
        for w in log.records.windows(2) {
            assert!(w[1].raw_loss < w[0].raw_loss);
            assert!(w[1].tokens > w[0].tokens);
        }
    }

    #[test]
    fn identical_configs_give_identical_logs() {
        let task = quad(1.0);
        let schedule = BatchSchedule::constant(3, 1.0).unwrap();
        let lr = LrSchedule::cosine(0.05, 30, 600);
        let kind = OptimizerKind::Adam(AdamHyper::default());
        let run = || {
            let ckpt = Checkpoint::fresh(&task, kind, 9).unwrap();
            train(&task, ckpt, &TrainSpec::new(&schedule, &lr, 600)).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let task = quad(0.5);
        let schedule = BatchSchedule::constant(4, 1.0).unwrap();
        let lr = LrSchedule::constant(0.05, 10_000);
        let kind = OptimizerKind::Adam(AdamHyper::default());
        let fresh = Checkpoint::fresh(&task, kind, 3).unwrap();
        let (full_log, full) =
            train(&task, fresh.clone(), &TrainSpec::new(&schedule, &lr, 400)).unwrap();
        let (mut log, half) = train(&task, fresh, &TrainSpec::new(&schedule, &lr, 200)).unwrap();
        let reloaded = Checkpoint::from_bytes(&half.to_bytes()).unwrap();
        let (rest, end) = train(&task, reloaded, &TrainSpec::new(&schedule, &lr, 200)).unwrap();
        log.extend(rest);
        assert_eq!(end, full);
        assert_eq!(log, full_log);
        assert_eq!(full_log.len(), 100);
    }

    #[test]
    fn token_accounting_and_lr_overlay() {
        let task = QuadraticTask::new(QuadraticTaskSpec {
            tokens_per_example: 3,
            ..QuadraticTaskSpec::isotropic(2, 1.0, 0.1)
        })
        .unwrap();
        let schedule = BatchSchedule::new(vec![
            Segment { start_token: 0, batch_size: 2, lr_multiplier: 1.0 },
            Segment { start_token: 20, batch_size: 4, lr_multiplier: 2.0 },
        ])
        .unwrap();
        let lr = LrSchedule::cosine(0.1, 0, 200);
        let ckpt = Checkpoint::fresh(&task, OptimizerKind::Sgd, 0).unwrap();
        let (log, _) = train(&task, ckpt, &TrainSpec::new(&schedule, &lr, 100)).unwrap();
        let mut start = 0;
        for r in &log.records {
            let seg = schedule.at(start);
            assert_eq!(r.batch_size, seg.batch_size);
            assert_eq!(r.tokens - start, (seg.batch_size * 3) as u64);
            assert_eq!(r.lr, seg.lr_multiplier * lr_at(&lr, start).unwrap());
            start = r.tokens;
        }
        // 4 steps of 6 tokens reach 24 ≥ 20, then 12-token steps.
        assert_eq!(log.records[3].tokens, 24);
        assert_eq!(log.records[4].batch_size, 4);
        assert_eq!(schedule.count_steps(3, 0, 100) as usize, log.len());
    }

    #[test]
    fn divergence_aborts_with_partial_log() {
        let task = quad(0.0);
        let ckpt = Checkpoint::fresh(&task, OptimizerKind::Sgd, 1).unwrap();
        let schedule = BatchSchedule::constant(1, 1.0).unwrap();
        // lr·h = 3 > 2: each step multiplies the offset by −2.
        let lr = LrSchedule::constant(3.0, 100_000);
        let err = train(&task, ckpt, &TrainSpec::new(&schedule, &lr, 10_000)).unwrap_err();
        assert!(err.error.is_numeric());
        assert!(!err.log.is_empty());
        assert!(err.log.len() < 10_000);

        let ckpt = Checkpoint::fresh(&task, OptimizerKind::Sgd, 1).unwrap();
        let spec = TrainSpec::new(&schedule, &lr, 10_000).max_loss(Some(1e6));
        let err = train(&task, ckpt, &spec).unwrap_err();
        assert!(err.log.len() < 20);
    }

    #[test]
    fn rejects_foreign_checkpoints_and_bad_budgets() {
        let a = quad(0.0);
        let b = quad(1.0);
        let schedule = BatchSchedule::constant(1, 1.0).unwrap();
        let lr = LrSchedule::constant(0.1, 100);
        let ckpt = Checkpoint::fresh(&a, OptimizerKind::Sgd, 1).unwrap();
        assert!(train(&b, ckpt.clone(), &TrainSpec::new(&schedule, &lr, 10)).is_err());
        assert!(train(&a, ckpt.clone(), &TrainSpec::new(&schedule, &lr, 0)).is_err());
        let past_end = TrainSpec::new(&schedule, &lr, 1000);
        let err = train(&a, ckpt, &past_end).unwrap_err();
        assert!(matches!(err.error, Error::OutOfRange(_)));
        assert_eq!(err.log.len(), 101);
    }

    #[test]
    fn csv_round_trip() {
        let task = quad(1.0);
        let ckpt = Checkpoint::fresh(&task, OptimizerKind::Sgd, 5).unwrap();
        let schedule = BatchSchedule::constant(2, 1.0).unwrap();
        let lr = LrSchedule::constant(0.1, 100);
        let (log, _) = train(&task, ckpt, &TrainSpec::new(&schedule, &lr, 40)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        log.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("tokens,step,batch_size,lr,raw_loss,smoothed_loss\n"));
        assert_eq!(RunLog::read_csv(&path).unwrap(), log);
    }
}
