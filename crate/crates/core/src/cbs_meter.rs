//! Critical batch size measurement by branched training.
//!
//! From a checkpoint trained at batch size `B`, one short branch is launched
//! per multiplier `k` with batch `round(k·B)` and learning-rate factor
//! `f(k)`. Each branch trains for the same token window and reports its
//! final smoothed loss `L_k`. The measured multiplier `k*` is the largest
//! `k` whose loss is within `ε` of every smaller multiplier's loss, giving
//! the interval `[k*·B, k_next·B)` for the critical batch size.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{train, BatchSchedule, Checkpoint, RunLog, TrainSpec, DEFAULT_EMA_ALPHA};
use crate::error::{Error, Result};
use crate::optim::{lr_at, LrSchedule, ScalingRule};
use crate::tasks::Task;

pub const DEFAULT_TOLERANCE: f64 = 0.01;

/// Branch sweep parameters at one checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepConfig {
    pub multipliers: Vec<f64>,
    pub window_tokens: u64,
    pub tolerance: f64,
    pub rule: ScalingRule,
    pub base_batch: usize,
    pub ema_alpha: f64,
    /// Independent branches per multiplier; their final losses are averaged.
    pub replicas: usize,
    pub max_loss: Option<f64>,
}

impl SweepConfig {
    pub fn new(multipliers: Vec<f64>, base_batch: usize, window_tokens: u64, rule: ScalingRule) -> Self {
        Self {
            multipliers,
            window_tokens,
            tolerance: DEFAULT_TOLERANCE,
            rule,
            base_batch,
            ema_alpha: DEFAULT_EMA_ALPHA,
            replicas: 1,
            max_loss: None,
        }
    }

    pub fn validate(&self, tokens_per_example: u64) -> Result<()> {
        if self.multipliers.is_empty() {
            return Err(Error::invalid("sweep needs at least one multiplier"));
        }
        if self.multipliers.iter().any(|&k| !(k > 0.0) || !k.is_finite()) {
            return Err(Error::invalid("multipliers must be positive"));
        }
        if self.multipliers.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("multipliers must be sorted ascending and distinct"));
        }
        if self.base_batch == 0 {
            return Err(Error::invalid("base batch must be positive"));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::invalid("tolerance must be positive"));
        }
        if self.replicas == 0 {
            return Err(Error::invalid("replicas must be at least 1"));
        }
        let batches: Vec<usize> = self
            .multipliers
            .iter()
            .map(|&k| realized_batch(k, self.base_batch))
            .collect();
        if batches.windows(2).any(|w| w[1] == w[0]) {
            return Err(Error::invalid(format!(
                "multipliers collapse onto the same batch size at base batch {}",
                self.base_batch
            )));
        }
        let largest = *batches.last().expect("nonempty") as u64 * tokens_per_example;
        if self.window_tokens < largest {
            return Err(Error::invalid(format!(
                "window of {} tokens is shorter than one batch ({largest} tokens) at the largest multiplier",
                self.window_tokens
            )));
        }
        Ok(())
    }
}

/// `round(k·B)`, at least 1.
pub fn realized_batch(k: f64, base_batch: usize) -> usize {
    ((k * base_batch as f64).round() as usize).max(1)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BranchOutcome {
    pub checkpoint_tokens: u64,
    /// Realized multiplier `batch / B`.
    pub k: f64,
    pub realized_batch: usize,
    /// Learning rate of the first branch step.
    pub lr: f64,
    /// `+∞` when the branch diverged.
    pub final_smoothed_loss: f64,
    pub diverged: bool,
}

/// Which random stream a branch draws its batches from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BranchStream {
    /// Continue the checkpoint's own data stream.
    Parent,
    /// Independent child stream keyed by checkpoint, multiplier and replica.
    Child { replica: usize },
}

fn branch_label(tokens: u64, k: f64, replica: usize) -> Vec<u8> {
    let mut label = b"branch".to_vec();
    label.extend_from_slice(&tokens.to_le_bytes());
    label.extend_from_slice(&k.to_bits().to_le_bytes());
    label.extend_from_slice(&(replica as u64).to_le_bytes());
    label
}

/// Trains one branch for the sweep window. Divergence is reported in the
/// outcome; any other failure is an error.
pub fn run_branch(
    task: &dyn Task,
    checkpoint: &Checkpoint,
    requested_k: f64,
    sweep: &SweepConfig,
    lr_schedule: &LrSchedule,
    stream: BranchStream,
) -> Result<(BranchOutcome, RunLog)> {
    let batch = realized_batch(requested_k, sweep.base_batch);
    let k = batch as f64 / sweep.base_batch as f64;
    let factor = sweep.rule.factor(k)?;
    let schedule = BatchSchedule::constant(batch, factor)?;
    let mut start = checkpoint.clone();
    if let BranchStream::Child { replica } = stream {
        start.rng = checkpoint
            .rng
            .child(&branch_label(checkpoint.tokens_seen, k, replica));
    }
    let lr = factor * lr_at(lr_schedule, checkpoint.tokens_seen)?;
    let spec = TrainSpec::new(&schedule, lr_schedule, sweep.window_tokens)
        .alpha(sweep.ema_alpha)
        .max_loss(sweep.max_loss);
    let outcome = |final_smoothed_loss: f64, diverged| BranchOutcome {
        checkpoint_tokens: checkpoint.tokens_seen,
        k,
        realized_batch: batch,
        lr,
        final_smoothed_loss,
        diverged,
    };
    match train(task, start, &spec) {
        Ok((log, end)) => {
            let loss = end.smoothed_loss.expect("a nonempty window takes at least one step");
            Ok((outcome(loss, false), log))
        }
        Err(abort) if abort.error.is_numeric() => Ok((outcome(f64::INFINITY, true), abort.log)),
        Err(abort) => Err(abort.error),
    }
}

/// One branch per multiplier (times replicas), run in parallel on the
/// current rayon pool and returned in multiplier order.
pub fn branch_sweep(
    task: &dyn Task,
    checkpoint: &Checkpoint,
    sweep: &SweepConfig,
    lr_schedule: &LrSchedule,
) -> Result<Vec<BranchOutcome>> {
    checkpoint.check_task(task)?;
    sweep.validate(task.tokens_per_example())?;
    let end = checkpoint.tokens_seen + sweep.window_tokens;
    if end > lr_schedule.total_tokens {
        return Err(Error::OutOfRange(format!(
            "branch window ends at {end} tokens, past the schedule end {}",
            lr_schedule.total_tokens
        )));
    }
    let jobs: Vec<(f64, usize)> = sweep
        .multipliers
        .iter()
        .flat_map(|&k| (0..sweep.replicas).map(move |r| (k, r)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(k, replica)| {
            run_branch(task, checkpoint, k, sweep, lr_schedule, BranchStream::Child { replica })
                .map(|(o, _)| o)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(runs
        .chunks(sweep.replicas)
        .map(|group| {
            let mut merged = group[0];
            if group.iter().any(|o| o.diverged) {
                merged.diverged = true;
                merged.final_smoothed_loss = f64::INFINITY;
            } else {
                merged.final_smoothed_loss =
                    group.iter().map(|o| o.final_smoothed_loss).sum::<f64>() / group.len() as f64;
            }
            merged
        })
        .collect())
}

/// Largest swept `k` with `L_k ≤ L_j + ε` for every smaller swept `j`.
///
/// Pairs must be sorted by `k`. Non-finite losses (diverged branches)
/// never qualify; the smallest finite-loss multiplier always does.
pub fn detect_kstar(per_k_loss: &[(f64, f64)], tolerance: f64) -> Result<f64> {
    if per_k_loss.is_empty() {
        return Err(Error::invalid("cannot detect k* from an empty loss table"));
    }
    if per_k_loss.windows(2).any(|w| !(w[1].0 > w[0].0)) {
        return Err(Error::invalid("loss table must be sorted by strictly increasing k"));
    }
    let mut best_so_far = f64::INFINITY;
    let mut k_star = None;
    for &(k, loss) in per_k_loss {
        // Non-finite losses are +∞ and cannot satisfy the bound.
        let loss = if loss.is_finite() { loss } else { f64::INFINITY };
        if loss.is_finite() && loss <= best_so_far + tolerance {
            k_star = Some(k);
        }
        best_so_far = best_so_far.min(loss);
    }
    k_star.ok_or_else(|| Error::invalid("every branch diverged; k* is undefined"))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CbsInterval {
    pub lower: f64,
    /// `None` when `k*` is the largest swept multiplier.
    pub upper: Option<f64>,
    pub point: Option<f64>,
}

impl CbsInterval {
    pub fn censored(&self) -> bool {
        self.upper.is_none()
    }
}

pub fn cbs_interval(k_star: f64, multipliers: &[f64], base_batch: usize) -> Result<CbsInterval> {
    let Some(pos) = multipliers.iter().position(|&k| k == k_star) else {
        return Err(Error::invalid(format!("k* = {k_star} is not a swept multiplier")));
    };
    let b = base_batch as f64;
    let lower = k_star * b;
    let upper = multipliers.get(pos + 1).map(|k| k * b);
    Ok(CbsInterval {
        lower,
        upper,
        point: upper.map(|u| (lower * u).sqrt()),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CbsMeasurement {
    pub checkpoint_tokens: u64,
    pub branches: Vec<BranchOutcome>,
    pub k_star: f64,
    pub interval: CbsInterval,
}

impl CbsMeasurement {
    pub fn per_k_loss(&self) -> Vec<(f64, f64)> {
        self.branches
            .iter()
            .map(|b| (b.k, b.final_smoothed_loss))
            .collect()
    }

    pub fn lower_bound(&self) -> f64 {
        self.interval.lower
    }
}

/// Sweep plus detection at a single checkpoint.
pub fn measure_at(
    task: &dyn Task,
    checkpoint: &Checkpoint,
    sweep: &SweepConfig,
    lr_schedule: &LrSchedule,
) -> Result<CbsMeasurement> {
    let branches = branch_sweep(task, checkpoint, sweep, lr_schedule)?;
    let table: Vec<(f64, f64)> = branches.iter().map(|b| (b.k, b.final_smoothed_loss)).collect();
    let k_star = detect_kstar(&table, sweep.tolerance)?;
    let realized: Vec<f64> = branches.iter().map(|b| b.k).collect();
    let interval = cbs_interval(k_star, &realized, sweep.base_batch)?;
    Ok(CbsMeasurement {
        checkpoint_tokens: checkpoint.tokens_seen,
        branches,
        k_star,
        interval,
    })
}

/// Anything that can hand out checkpoints by exact token position.
pub trait CheckpointSource {
    fn checkpoint_at(&self, tokens: u64) -> Result<Checkpoint>;
}

impl CheckpointSource for BTreeMap<u64, Checkpoint> {
    fn checkpoint_at(&self, tokens: u64) -> Result<Checkpoint> {
        self.get(&tokens)
            .cloned()
            .ok_or_else(|| Error::NotFound(format!("no checkpoint at {tokens} tokens")))
    }
}

/// Multipliers for a named set of checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultiplierGroup {
    pub checkpoints: Vec<u64>,
    pub multipliers: Vec<f64>,
}

/// Sweep settings shared across a curve, with per-checkpoint grids.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepTemplate {
    pub base: SweepConfig,
    pub groups: Vec<MultiplierGroup>,
}

impl SweepTemplate {
    pub fn config_for(&self, tokens: u64) -> SweepConfig {
        let mut config = self.base.clone();
        if let Some(group) = self.groups.iter().find(|g| g.checkpoints.contains(&tokens)) {
            config.multipliers = group.multipliers.clone();
        }
        config
    }
}

/// One measurement per checkpoint position, in the order given.
pub fn measure_cbs_curve(
    task: &dyn Task,
    source: &dyn CheckpointSource,
    positions: &[u64],
    template: &SweepTemplate,
    lr_schedule: &LrSchedule,
) -> Result<Vec<CbsMeasurement>> {
    positions
        .iter()
        .map(|&tokens| {
            let checkpoint = source.checkpoint_at(tokens)?;
            measure_at(task, &checkpoint, &template.config_for(tokens), lr_schedule)
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct CurveRow {
    checkpoint_tokens: u64,
    k_star: f64,
    lower: f64,
    upper: Option<f64>,
    point: Option<f64>,
    censored: bool,
}

pub fn sweep_csv(curve: &[CbsMeasurement]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "checkpoint_tokens",
        "k",
        "realized_batch",
        "lr",
        "final_smoothed_loss",
        "diverged",
    ])?;
    for b in curve.iter().flat_map(|m| &m.branches) {
        w.serialize((
            b.checkpoint_tokens,
            b.k,
            b.realized_batch,
            b.lr,
            b.final_smoothed_loss,
            b.diverged,
        ))?;
    }
    finish(w)
}

pub fn curve_csv(curve: &[CbsMeasurement]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for m in curve {
        w.serialize(CurveRow {
            checkpoint_tokens: m.checkpoint_tokens,
            k_star: m.k_star,
            lower: m.interval.lower,
            upper: m.interval.upper,
            point: m.interval.point,
            censored: m.interval.censored(),
        })?;
    }
    finish(w)
}

/// A curve row as read back from disk, enough to plan a warmup or fit a law.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub checkpoint_tokens: u64,
    pub k_star: f64,
    pub interval: CbsInterval,
}

impl From<&CbsMeasurement> for CurvePoint {
    fn from(m: &CbsMeasurement) -> Self {
        Self {
            checkpoint_tokens: m.checkpoint_tokens,
            k_star: m.k_star,
            interval: m.interval,
        }
    }
}

pub fn read_curve_csv(bytes: &[u8]) -> Result<Vec<CurvePoint>> {
    let mut r = csv::Reader::from_reader(bytes);
    r.deserialize::<CurveRow>()
        .map(|row| {
            let row = row?;
            if row.censored != row.upper.is_none() {
                return Err(Error::invalid(format!(
                    "curve row at {} tokens has inconsistent censoring",
                    row.checkpoint_tokens
                )));
            }
            Ok(CurvePoint {
                checkpoint_tokens: row.checkpoint_tokens,
                k_star: row.k_star,
                interval: CbsInterval {
                    lower: row.lower,
                    upper: row.upper,
                    point: row.point,
                },
            })
        })
        .collect()
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner()
        .map_err(|e| Error::io("<csv buffer>", e.into_error()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::OptimizerKind;
    use crate::tasks::{QuadraticTask, QuadraticTaskSpec};
    use proptest::prelude::*;

    /// Literal reading of the definition: the maximum k such that for all
    /// smaller k', L_k ≤ L_k' + ε, over finite-loss candidates.
    pub(crate) fn brute_kstar(table: &[(f64, f64)], eps: f64) -> Option<f64> {
        table
            .iter()
            .filter(|(_, l)| l.is_finite())
            .filter(|(k, l)| table.iter().filter(|(j, _)| j < k).all(|(_, lj)| *l <= lj + eps))
            .map(|(k, _)| *k)
            .fold(None, |acc: Option<f64>, k| Some(acc.map_or(k, |a| a.max(k))))
    }

    #[test]
    fn worked_example() {
        let table = [(0.5, 2.700), (1.0, 2.702), (2.0, 2.708), (4.0, 2.705), (8.0, 2.750)];
        assert_eq!(detect_kstar(&table, DEFAULT_TOLERANCE).unwrap(), 4.0);
        assert_eq!(DEFAULT_TOLERANCE, 0.01);
        let flat: Vec<(f64, f64)> = [0.25, 1.0, 3.0].iter().map(|&k| (k, 1.5)).collect();
        assert_eq!(detect_kstar(&flat, 0.01).unwrap(), 3.0);
        assert!(detect_kstar(&[], 0.01).is_err());
    }

    #[test]
    fn diverged_branches_cap_kstar() {
        let table = [(1.0, 2.0), (2.0, f64::INFINITY), (4.0, 2.001)];
        // 4 is compared against the diverged 2 as well, which it beats.
        assert_eq!(detect_kstar(&table, 0.01).unwrap(), 4.0);
        let table = [(1.0, f64::INFINITY), (2.0, 3.0)];
        assert_eq!(detect_kstar(&table, 0.01).unwrap(), 2.0);
        let table = [(1.0, 2.0), (2.0, f64::NAN)];
        assert_eq!(detect_kstar(&table, 0.01).unwrap(), 1.0);
        assert!(detect_kstar(&[(1.0, f64::INFINITY)], 0.01).is_err());
    }

    #[test]
    fn interval_examples() {
        let ks = [0.5, 1.0, 2.0, 4.0, 8.0];
        let i = cbs_interval(4.0, &ks, 1024).unwrap();
        assert_eq!(i.lower, 4096.0);
        assert_eq!(i.upper, Some(8192.0));
        assert!((i.point.unwrap() - 4096.0 * 2f64.sqrt()).abs() < 1e-9);
        assert_eq!(i.point.unwrap().round(), 5793.0);

        let i = cbs_interval(8.0, &ks, 1024).unwrap();
        assert!(i.censored());
        assert_eq!(i.point, None);

        let i = cbs_interval(0.25, &[0.25, 0.5], 1024).unwrap();
        assert_eq!((i.lower, i.upper), (256.0, Some(512.0)));
        assert!((i.point.unwrap() - 362.038_671_967_512_6).abs() < 1e-9);

        assert!(cbs_interval(3.0, &ks, 1024).is_err());
    }

    proptest! {
        #[test]
        fn matches_brute_force(
            table in prop::collection::vec((0.0f64..3.0, prop::bool::weighted(0.1)), 1..=8),
            eps in 0.0f64..0.5,
        ) {
            let table: Vec<(f64, f64)> = table
                .iter()
                .enumerate()
                .map(|(i, &(l, inf))| ((i + 1) as f64 * 0.5, if inf { f64::INFINITY } else { l }))
                .collect();
            let fast = detect_kstar(&table, eps).ok();
            prop_assert_eq!(fast, brute_kstar(&table, eps));
        }

        #[test]
        fn tolerance_is_monotone(
            losses in prop::collection::vec(0.0f64..1.0, 1..=8),
            e1 in 0.0f64..0.3,
            e2 in 0.0f64..0.3,
        ) {
            let table: Vec<(f64, f64)> =
                losses.iter().enumerate().map(|(i, &l)| (i as f64 + 1.0, l)).collect();
            let (lo, hi) = (e1.min(e2), e1.max(e2));
            prop_assert!(detect_kstar(&table, lo).unwrap() <= detect_kstar(&table, hi).unwrap());
        }

        #[test]
        fn shift_invariant(
            losses in prop::collection::vec(0i32..200, 1..=8),
            shift in -50i32..50,
        ) {
            // Losses on a dyadic grid keep the shifted comparisons exact.
            let table: Vec<(f64, f64)> = losses
                .iter()
                .enumerate()
                .map(|(i, &l)| (i as f64 + 1.0, l as f64 / 64.0))
                .collect();
            let shifted: Vec<(f64, f64)> =
                table.iter().map(|&(k, l)| (k, l + shift as f64 / 8.0)).collect();
            prop_assert_eq!(
                detect_kstar(&table, 0.125).unwrap(),
                detect_kstar(&shifted, 0.125).unwrap()
            );
        }

        #[test]
        fn dropping_larger_multipliers_never_lowers_the_bound(
            losses in prop::collection::vec(0.0f64..1.0, 2..=8),
            drop_pick in any::<prop::sample::Index>(),
        ) {
            let table: Vec<(f64, f64)> =
                losses.iter().enumerate().map(|(i, &l)| (i as f64 + 1.0, l)).collect();
            let k_star = detect_kstar(&table, 0.05).unwrap();
            let above: Vec<usize> = (0..table.len()).filter(|&i| table[i].0 > k_star).collect();
            if !above.is_empty() {
                let drop = above[drop_pick.index(above.len())];
                let reduced: Vec<(f64, f64)> = table
                    .iter()
                    .enumerate()
                    .filter(|&(i, _)| i != drop)
                    .map(|(_, &p)| p)
                    .collect();
                prop_assert!(detect_kstar(&reduced, 0.05).unwrap() >= k_star);
            }
        }
    }

    fn quad_setup(noise: f64) -> (QuadraticTask, Checkpoint) {
        let spec = QuadraticTaskSpec::isotropic(2, 1.0, noise).with_init(vec![2.0, -1.0]);
        let task = QuadraticTask::new(spec).unwrap();
        let ckpt = Checkpoint::fresh(&task, OptimizerKind::Sgd, 4).unwrap();
        (task, ckpt)
    }

    #[test]
    fn identity_branch_equals_continuation() {
        let (task, ckpt) = quad_setup(1.0);
        let lr = LrSchedule::constant(0.05, 10_000);
        let sweep = SweepConfig::new(vec![1.0], 4, 400, ScalingRule::Linear);
        let (branch, branch_log) =
            run_branch(&task, &ckpt, 1.0, &sweep, &lr, BranchStream::Parent).unwrap();
        let schedule = BatchSchedule::constant(4, 1.0).unwrap();
        let (log, end) = train(&task, ckpt, &TrainSpec::new(&schedule, &lr, 400)).unwrap();
        assert_eq!(branch_log, log);
        assert_eq!(branch.final_smoothed_loss, end.smoothed_loss.unwrap());
    }

    #[test]
    fn noiseless_branches_follow_the_closed_form() {
        // With Σ = 0 and SGD on H = I, a branch with batch kB and lr k·η
        // takes Δ/(kB) steps, each contracting the offset by (1 − kη). The
        // recorded loss is evaluated before the last update.
        let (task, ckpt) = quad_setup(0.0);
        let eta = 0.01;
        let base = 4;
        let window = 64;
        let lr = LrSchedule::constant(eta, 10_000);
        let mut sweep = SweepConfig::new(vec![0.25, 0.5, 1.0, 2.0, 4.0, 8.0], base, window, ScalingRule::Linear);
        sweep.ema_alpha = 1.0;
        let out = branch_sweep(&task, &ckpt, &sweep, &lr).unwrap();
        let start_loss = 0.5 * (4.0 + 1.0);
        for b in &out {
            let steps = window as f64 / b.realized_batch as f64 - 1.0;
            let factor = 1.0 - b.k * eta;
            let want = start_loss * factor.powf(2.0 * steps);
            assert!((b.final_smoothed_loss - want).abs() < 1e-12, "k {}: {} vs {want}", b.k, b.final_smoothed_loss);
        }
        // Fewer, larger steps contract less: the loss grows with k.
        for w in out.windows(2) {
            assert!(w[1].final_smoothed_loss > w[0].final_smoothed_loss);
        }
    }

    #[test]
    fn unstable_branches_are_flagged() {
        let (task, ckpt) = quad_setup(0.0);
        // f(k)·η exceeds 2/λ_max = 2 once k > 4.
        let eta = 0.5;
        let lr = LrSchedule::constant(eta, 100_000);
        let mut sweep = SweepConfig::new(vec![1.0, 2.0, 8.0], 1, 8_000, ScalingRule::Linear);
        sweep.max_loss = Some(1e12);
        let out = branch_sweep(&task, &ckpt, &sweep, &lr).unwrap();
        assert!(!out[0].diverged && !out[1].diverged);
        assert!(out[2].diverged);
        assert_eq!(out[2].final_smoothed_loss, f64::INFINITY);
        assert!(detect_kstar(&[(1.0, 0.0), (8.0, f64::INFINITY)], 0.01).unwrap() == 1.0);
    }

    #[test]
    fn sweep_validation() {
        let (task, ckpt) = quad_setup(1.0);
        let lr = LrSchedule::constant(0.05, 1_000);
        let bad_order = SweepConfig::new(vec![2.0, 1.0], 4, 64, ScalingRule::Linear);
        assert!(branch_sweep(&task, &ckpt, &bad_order, &lr).is_err());
        let short = SweepConfig::new(vec![1.0, 8.0], 4, 16, ScalingRule::Linear);
        assert!(branch_sweep(&task, &ckpt, &short, &lr).is_err());
        let collapse = SweepConfig::new(vec![0.1, 0.2], 2, 64, ScalingRule::Linear);
        assert!(branch_sweep(&task, &ckpt, &collapse, &lr).is_err());
        let past_end = SweepConfig::new(vec![1.0], 4, 2_000, ScalingRule::Linear);
        assert!(matches!(
            branch_sweep(&task, &ckpt, &past_end, &lr),
            Err(Error::OutOfRange(_))
        ));
    }

    #[test]
    fn curve_measurement_and_csv() {
        let (task, ckpt) = quad_setup(1.0);
        let lr = LrSchedule::constant(0.05, 10_000);
        let sweep = SweepConfig::new(vec![0.5, 1.0, 2.0], 4, 64, ScalingRule::Linear);
        let template = SweepTemplate { base: sweep, groups: vec![] };
        let mut store = BTreeMap::new();
        store.insert(0, ckpt);
        let curve = measure_cbs_curve(&task, &store, &[0], &template, &lr).unwrap();
        assert_eq!(curve.len(), 1);
        assert!(matches!(
            measure_cbs_curve(&task, &store, &[7], &template, &lr),
            Err(Error::NotFound(_))
        ));
        let text = String::from_utf8(curve_csv(&curve).unwrap()).unwrap();
        assert!(text.starts_with("checkpoint_tokens,k_star,lower,upper,point,censored\n"));
        let back = read_curve_csv(text.as_bytes()).unwrap();
        assert_eq!(back[0], CurvePoint::from(&curve[0]));
        let sweep_text = String::from_utf8(sweep_csv(&curve).unwrap()).unwrap();
        assert!(sweep_text.starts_with("checkpoint_tokens,k,realized_batch,lr,final_smoothed_loss,diverged\n"));
        assert_eq!(sweep_text.lines().count(), 4);
    }

    #[test]
    fn replicas_average_and_parallel_is_deterministic() {
        let (task, ckpt) = quad_setup(1.0);
        let lr = LrSchedule::constant(0.05, 10_000);
        let mut sweep = SweepConfig::new(vec![0.5, 1.0, 2.0], 4, 64, ScalingRule::Linear);
        sweep.replicas = 3;
        let a = branch_sweep(&task, &ckpt, &sweep, &lr).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| branch_sweep(&task, &ckpt, &sweep, &lr).unwrap());
        assert_eq!(a, b);
        let singles: Vec<f64> = (0..3)
            .map(|r| {
                run_branch(&task, &ckpt, 1.0, &sweep, &lr, BranchStream::Child { replica: r })
                    .unwrap()
                    .0
                    .final_smoothed_loss
            })
            .collect();
        assert_eq!(a[1].final_smoothed_loss, singles.iter().sum::<f64>() / 3.0);
    }
}
