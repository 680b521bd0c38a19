//! Batch size warmup: start small and double the batch whenever the
//! measured critical batch size exceeds twice the current batch.
//!
//! A plan is compared against two controls, a fixed small batch at the
//! initial learning rate and a fixed large batch at the final warmup batch
//! with a fully scaled learning rate. All arms share a linear anneal tail so
//! the comparison can be made both before and after annealing.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cbs_meter::{measure_at, CurvePoint, SweepConfig};
use crate::engine::{train, BatchSchedule, Checkpoint, RunLog, Segment, TrainSpec};
use crate::error::{Error, Result};
use crate::optim::{LrSchedule, ScalingRule};
use crate::tasks::Task;

pub fn should_double(b_star: f64, batch: usize) -> bool {
    b_star > 2.0 * batch as f64
}

/// Token positions at which to double, using each measurement's lower
/// bound as a conservative critical batch size. The `i`-th threshold is the
/// first checkpoint after the previous threshold whose lower bound exceeds
/// `2^i·B₀`. A measurement at token 0 never triggers a doubling since the
/// run starts at `B₀` by definition.
pub fn thresholds_from_curve(curve: &[CurvePoint], initial_batch: usize, max_doublings: usize) -> Result<Vec<u64>> {
    if curve.is_empty() {
        return Err(Error::invalid("cannot plan a warmup from an empty curve"));
    }
    if curve.windows(2).any(|w| w[1].checkpoint_tokens <= w[0].checkpoint_tokens) {
        return Err(Error::invalid("curve must be sorted by strictly increasing checkpoint tokens"));
    }
    if initial_batch == 0 {
        return Err(Error::invalid("initial batch must be positive"));
    }
    let mut thresholds = Vec::new();
    let mut batch = initial_batch;
    let mut from = curve.partition_point(|p| p.checkpoint_tokens == 0);
    while thresholds.len() < max_doublings {
        let Some(offset) = curve[from..]
            .iter()
            .position(|p| should_double(p.interval.lower, batch))
        else {
            break;
        };
        let idx = from + offset;
        thresholds.push(curve[idx].checkpoint_tokens);
        batch *= 2;
        from = idx + 1;
    }
    Ok(thresholds)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarmupPlan {
    pub initial_batch: usize,
    pub initial_lr: f64,
    pub rule: ScalingRule,
    pub thresholds: Vec<u64>,
    /// Linear learning-rate warmup shared by all arms.
    #[serde(default)]
    pub lr_warmup_tokens: u64,
}

impl WarmupPlan {
    pub fn validate(&self) -> Result<()> {
        if self.initial_batch == 0 {
            return Err(Error::invalid("initial batch must be positive"));
        }
        if !(self.initial_lr > 0.0) || !self.initial_lr.is_finite() {
            return Err(Error::invalid("initial learning rate must be positive"));
        }
        if self.thresholds.first() == Some(&0) {
            return Err(Error::invalid("doubling thresholds must be after token 0"));
        }
        if self.thresholds.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("doubling thresholds must be strictly increasing"));
        }
        if self.thresholds.len() >= self.initial_batch.leading_zeros() as usize {
            return Err(Error::invalid("too many doublings for the batch size type"));
        }
        Ok(())
    }

    pub fn doublings(&self) -> usize {
        self.thresholds.len()
    }

    pub fn final_batch(&self) -> usize {
        self.initial_batch << self.doublings()
    }

    /// Batch `2^i·B₀` with multiplier `f(2^i)` after the `i`-th threshold.
    pub fn schedule(&self) -> Result<BatchSchedule> {
        self.validate()?;
        let steps: Vec<(u64, usize)> = std::iter::once(0)
            .chain(self.thresholds.iter().copied())
            .enumerate()
            .map(|(i, start)| (start, self.initial_batch << i))
            .collect();
        BatchSchedule::scaled(self.rule, self.initial_batch, &steps)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let plan: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        plan.validate()?;
        Ok(plan)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArmKind {
    Warmup,
    SmallBatch,
    LargeBatch,
}

impl ArmKind {
    pub fn name(self) -> &'static str {
        match self {
            ArmKind::Warmup => "warmup",
            ArmKind::SmallBatch => "small_batch",
            ArmKind::LargeBatch => "large_batch",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Arm {
    pub kind: ArmKind,
    pub schedule: BatchSchedule,
    pub lr: LrSchedule,
}

impl Arm {
    pub fn grad_steps(&self, tokens_per_example: u64) -> u64 {
        self.schedule.count_steps(tokens_per_example, 0, self.lr.total_tokens)
    }
}

/// Warmup, small-batch control and large-batch control, in that order.
pub fn build_arms(plan: &WarmupPlan, total_tokens: u64, anneal_tokens: u64) -> Result<[Arm; 3]> {
    let lr = LrSchedule::anneal_tail(plan.initial_lr, plan.lr_warmup_tokens, total_tokens, anneal_tokens);
    lr.validate()?;
    if plan.thresholds.last().is_some_and(|&t| t >= total_tokens) {
        return Err(Error::invalid("doubling thresholds must fall inside the run"));
    }
    let final_k = (1usize << plan.doublings()) as f64;
    Ok([
        Arm { kind: ArmKind::Warmup, schedule: plan.schedule()?, lr },
        Arm {
            kind: ArmKind::SmallBatch,
            schedule: BatchSchedule::constant(plan.initial_batch, 1.0)?,
            lr,
        },
        Arm {
            kind: ArmKind::LargeBatch,
            schedule: BatchSchedule::constant(plan.final_batch(), plan.rule.factor(final_k)?)?,
            lr,
        },
    ])
}

/// Percentage of gradient steps saved relative to `baseline`.
pub fn steps_saved_pct(steps: u64, baseline: u64) -> f64 {
    if baseline == 0 {
        return 0.0;
    }
    100.0 * (1.0 - steps as f64 / baseline as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArmResult {
    pub kind: ArmKind,
    pub log: RunLog,
    pub checkpoint: Checkpoint,
    /// Loss when the anneal tail begins.
    pub final_pt_loss: f64,
    /// Loss at the end of the anneal tail.
    pub final_mt_loss: f64,
    pub grad_steps: u64,
}

/// Arm comparison settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ArmRunConfig {
    pub ema_alpha: f64,
    /// Reported losses are means of the smoothed loss over this many
    /// trailing tokens before each endpoint (the last record when empty).
    pub report_window: u64,
    /// Independent data streams per arm; reported losses are averaged.
    /// Replica 0 continues the starting checkpoint's own stream.
    pub replicas: usize,
}

impl Default for ArmRunConfig {
    fn default() -> Self {
        Self { ema_alpha: crate::engine::DEFAULT_EMA_ALPHA, report_window: 0, replicas: 1 }
    }
}

/// Runs every arm from the same starting checkpoint. The returned log and
/// checkpoint belong to replica 0.
pub fn run_arms(task: &dyn Task, init: &Checkpoint, arms: &[Arm], config: &ArmRunConfig) -> Result<Vec<ArmResult>> {
    if config.replicas == 0 {
        return Err(Error::invalid("arm replicas must be at least 1"));
    }
    let jobs: Vec<(usize, usize)> = (0..arms.len())
        .flat_map(|a| (0..config.replicas).map(move |r| (a, r)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(a, replica)| run_arm(task, init, &arms[a], config, replica))
        .collect::<Result<Vec<_>>>()?;
    Ok(runs
        .chunks(config.replicas)
        .map(|group| {
            let n = group.len() as f64;
            let mut merged = group[0].clone();
            merged.final_pt_loss = group.iter().map(|r| r.final_pt_loss).sum::<f64>() / n;
            merged.final_mt_loss = group.iter().map(|r| r.final_mt_loss).sum::<f64>() / n;
            merged
        })
        .collect())
}

fn run_arm(task: &dyn Task, init: &Checkpoint, arm: &Arm, config: &ArmRunConfig, replica: usize) -> Result<ArmResult> {
    let mut start = init.clone();
    if replica > 0 {
        start.rng = init.rng.child_u64("arm-replica", replica as u64);
    }
    let budget = arm.lr.total_tokens.saturating_sub(init.tokens_seen);
    let spec = TrainSpec::new(&arm.schedule, &arm.lr, budget).alpha(config.ema_alpha);
    let (log, checkpoint) = train(task, start, &spec).map_err(Error::from)?;
    let pt = log
        .window_mean(arm.lr.anneal_start(), config.report_window)
        .ok_or_else(|| Error::invalid("run ended before the anneal tail began"))?;
    let mt = log
        .window_mean(checkpoint.tokens_seen, config.report_window)
        .expect("nonempty log");
    Ok(ArmResult {
        kind: arm.kind,
        grad_steps: log.len() as u64,
        log,
        checkpoint,
        final_pt_loss: pt,
        final_mt_loss: mt,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct ReportRow<'a> {
    arm: &'a str,
    final_pt_loss: f64,
    final_mt_loss: f64,
    grad_steps: u64,
    steps_saved_pct: f64,
}

/// Comparison table; savings are relative to the small-batch arm.
pub fn report_csv(results: &[ArmResult]) -> Result<Vec<u8>> {
    let baseline = results
        .iter()
        .find(|r| r.kind == ArmKind::SmallBatch)
        .map_or(0, |r| r.grad_steps);
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in results {
        w.serialize(ReportRow {
            arm: r.kind.name(),
            final_pt_loss: r.final_pt_loss,
            final_mt_loss: r.final_mt_loss,
            grad_steps: r.grad_steps,
            steps_saved_pct: steps_saved_pct(r.grad_steps, baseline),
        })?;
    }
    w.into_inner()
        .map_err(|e| Error::io("<csv buffer>", e.into_error()))
}

/// Experimental: decide doublings during training by measuring the critical
/// batch size every `check_every` tokens instead of reading a curve.
///
/// Returns the log, the final checkpoint and the schedule that was used.
pub fn run_online(
    task: &dyn Task,
    init: Checkpoint,
    plan: &WarmupPlan,
    lr: &LrSchedule,
    sweep: &SweepConfig,
    check_every: u64,
    max_doublings: usize,
) -> Result<(RunLog, Checkpoint, BatchSchedule)> {
    if check_every == 0 {
        return Err(Error::invalid("check interval must be positive"));
    }
    let mut state = init;
    let mut log = RunLog::default();
    let mut batch = plan.initial_batch;
    let mut segments = vec![Segment { start_token: 0, batch_size: batch, lr_multiplier: 1.0 }];
    while state.tokens_seen < lr.total_tokens {
        let factor = plan.rule.factor(batch as f64 / plan.initial_batch as f64)?;
        let schedule = BatchSchedule::constant(batch, factor)?;
        let budget = check_every.min(lr.total_tokens - state.tokens_seen);
        let (part, next) = train(task, state, &TrainSpec::new(&schedule, lr, budget).alpha(sweep.ema_alpha))
            .map_err(Error::from)?;
        log.extend(part);
        state = next;
        let doublings = segments.len() - 1;
        let room = state.tokens_seen + sweep.window_tokens <= lr.anneal_start();
        if doublings < max_doublings && room {
            let local = SweepConfig { base_batch: batch, ..sweep.clone() };
            let m = measure_at(task, &state, &local, lr)?;
            if should_double(m.lower_bound(), batch) {
                batch *= 2;
                segments.push(Segment {
                    start_token: state.tokens_seen,
                    batch_size: batch,
                    lr_multiplier: plan.rule.factor(batch as f64 / plan.initial_batch as f64)?,
                });
            }
        }
    }
    Ok((log, state, BatchSchedule::new(segments)?))
}
