//! Experiment orchestration: base training with checkpoints, branched sweeps,
//! noise-scale measurement, warmup comparisons and curve analysis.
//!
//! Each command reads and writes through a [`RunStore`]. Result files land in
//! `results/<run_id>/` and are never overwritten unless `force` is set.
//! Work inside a command is spread over the current rayon pool, and every
//! output is keyed, so files are byte-identical for any thread count.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;

use crate::cbs_meter::{curve_csv, measure_cbs_curve, read_curve_csv, sweep_csv, CbsMeasurement, CurvePoint};
use crate::config::ExperimentConfig;
use crate::engine::{load_checkpoint, train, BatchSchedule, Checkpoint, RunLog, TrainSpec};
use crate::error::{Error, Result};
use crate::noise_scale::{collect_pairs, confidence_interval, estimate, noise_csv, NoiseScaleEstimate};
use crate::rng::RngStream;
use crate::runstore::{fingerprint_text, RunHandle, RunStatus, RunStore};
use crate::scaling_laws::{analyze, AnalysisReport, CurveFamily, FitTarget};
use crate::tasks::Task;
use crate::warmup::{build_arms, report_csv, run_arms, run_online, thresholds_from_curve, ArmResult, ArmRunConfig, WarmupPlan};

pub const SWEEP_FILE: &str = "sweep.csv";
pub const CURVE_FILE: &str = "curve.csv";
pub const NOISE_FILE: &str = "noise.csv";
pub const WARMUP_REPORT_FILE: &str = "warmup_report.csv";
pub const WARMUP_PLAN_FILE: &str = "warmup_plan.toml";

/// One experiment bound to a store.
pub struct Pipeline {
    store: RunStore,
    config: ExperimentConfig,
    config_text: String,
    task: Box<dyn Task>,
    force: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub run_id: String,
    /// Checkpoint the run resumed from, if an interrupted run was found.
    pub resumed_from: Option<u64>,
    pub final_tokens: u64,
    pub final_smoothed_loss: f64,
}

#[derive(Clone, Debug)]
pub struct WarmupOutcome {
    pub plan: WarmupPlan,
    pub results: Vec<ArmResult>,
    /// Registered run ids, one per arm.
    pub arm_runs: Vec<String>,
    pub report_path: PathBuf,
}

impl Pipeline {
    /// Parses and validates `config_text`. `seed` overrides the config's seed.
    pub fn new(store: RunStore, config_text: &str, seed: Option<u64>) -> Result<Self> {
        let mut config = ExperimentConfig::from_toml(config_text)?;
        if let Some(seed) = seed {
            config.seed = seed;
        }
        let task = config.task.build()?;
        Ok(Self { store, config, config_text: config_text.to_owned(), task, force: false })
    }

    /// Rebuilds the pipeline of an existing run from its manifest.
    pub fn from_run(store: RunStore, run_id: &str) -> Result<Self> {
        let manifest = store.open_run(run_id)?.manifest().clone();
        let pipeline = Self::new(store, &manifest.config_text, Some(manifest.seed))?;
        if pipeline.run_id() != run_id {
            return Err(Error::Conflict(format!(
                "run {run_id:?} was stored under a different name than its config implies ({})",
                pipeline.run_id()
            )));
        }
        Ok(pipeline)
    }

    pub fn force(mut self, force: bool) -> Self {
        self.force = force;
        self
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn store(&self) -> &RunStore {
        &self.store
    }

    pub fn task(&self) -> &dyn Task {
        self.task.as_ref()
    }

    pub fn run_id(&self) -> String {
        format!("{}-s{}", self.config.name, self.config.seed)
    }

    pub fn results_dir(&self) -> Result<PathBuf> {
        self.store.results_dir(&self.run_id())
    }

    fn step_tokens(&self) -> u64 {
        self.config.train.batch_size as u64 * self.task.tokens_per_example()
    }

    /// Trains the base run, checkpointing at every configured position and
    /// at the end of the budget. An interrupted run with the same config
    /// resumes from its last checkpoint; a complete one needs `force`.
    pub fn train(&self) -> Result<TrainOutcome> {
        let run_id = self.run_id();
        let mut resumed_from = None;
        let (mut handle, mut state, mut log) = match self.store.open_run(&run_id) {
            Ok(_) if self.force => {
                self.store.remove_run(&run_id)?;
                self.register_base()?
            }
            Ok(handle) => {
                if handle.manifest().config_fingerprint != fingerprint_text(&self.config_text) {
                    return Err(Error::Conflict(format!(
                        "run {run_id:?} was created from a different config; rerun with --force to replace it"
                    )));
                }
                if handle.manifest().status == RunStatus::Complete {
                    return Err(Error::Conflict(format!(
                        "run {run_id:?} is already complete; rerun with --force to retrain"
                    )));
                }
                match handle.checkpoint_positions().last() {
                    Some(&last) => {
                        let state = load_checkpoint(&handle.find_checkpoint(last)?)?;
                        let mut log = if handle.log_path().is_file() { handle.read_log()? } else { RunLog::default() };
                        log.records.retain(|r| r.tokens <= last);
                        info!("resuming {run_id} from {last} tokens");
                        resumed_from = Some(last);
                        (handle, state, log)
                    }
                    None => {
                        self.store.remove_run(&run_id)?;
                        self.register_base()?
                    }
                }
            }
            Err(Error::NotFound(_)) => self.register_base()?,
            Err(e) => return Err(e),
        };

        let t = &self.config.train;
        let schedule = BatchSchedule::constant(t.batch_size, 1.0)?;
        let lr = self.config.lr_schedule();
        let step = self.step_tokens();
        let mut stops: Vec<u64> = t.checkpoints.clone();
        stops.push(t.token_budget.div_ceil(step) * step);
        stops.dedup();
        stops.retain(|&s| s > state.tokens_seen);
        for stop in stops {
            let spec = TrainSpec::new(&schedule, &lr, stop - state.tokens_seen).alpha(t.ema_alpha);
            match train(self.task(), state, &spec) {
                Ok((part, next)) => {
                    log.extend(part);
                    state = next;
                    handle.save_checkpoint(&state)?;
                    handle.write_log(&log)?;
                    info!("{run_id}: checkpoint at {} tokens", state.tokens_seen);
                }
                Err(abort) => {
                    log.extend(abort.log);
                    handle.write_log(&log)?;
                    handle.set_status(RunStatus::Failed)?;
                    return Err(abort.error);
                }
            }
        }
        handle.set_status(RunStatus::Complete)?;
        Ok(TrainOutcome {
            run_id,
            resumed_from,
            final_tokens: state.tokens_seen,
            final_smoothed_loss: state.smoothed_loss.unwrap_or(f64::NAN),
        })
    }

    fn register_base(&self) -> Result<(RunHandle, Checkpoint, RunLog)> {
        let c = &self.config;
        let summary = format!(
            "constant batch {} for {} tokens, {:?} lr {} over {} tokens",
            c.train.batch_size,
            c.train.token_budget,
            c.lr.kind,
            c.lr.base_lr,
            c.lr_schedule().total_tokens
        );
        let mut handle = self
            .store
            .register_run(&self.run_id(), &self.config_text, c.seed, c.task.clone(), summary)?;
        let fresh = Checkpoint::fresh(self.task(), c.optimizer, c.seed)?;
        if c.train.checkpoints.first() == Some(&0) {
            handle.save_checkpoint(&fresh)?;
        }
        Ok((handle, fresh, RunLog::default()))
    }

    fn base_run(&self) -> Result<RunHandle> {
        let handle = self.store.open_run(&self.run_id())?;
        if handle.manifest().config_fingerprint != fingerprint_text(&self.config_text) {
            return Err(Error::Conflict(format!("run {:?} was created from a different config", self.run_id())));
        }
        Ok(handle)
    }

    /// Resolves requested positions (all indexed checkpoints when empty) and
    /// checks that each one exists before any compute starts.
    fn positions(&self, handle: &RunHandle, requested: &[u64]) -> Result<Vec<u64>> {
        let mut positions = if requested.is_empty() { handle.checkpoint_positions() } else { requested.to_vec() };
        positions.sort_unstable();
        positions.dedup();
        for &p in &positions {
            handle.find_checkpoint(p)?;
        }
        if positions.is_empty() {
            return Err(Error::NotFound(format!("run {:?} has no checkpoints", self.run_id())));
        }
        Ok(positions)
    }

    fn claim(&self, paths: &[PathBuf]) -> Result<()> {
        if self.force {
            return Ok(());
        }
        match paths.iter().find(|p| p.exists()) {
            Some(p) => Err(Error::Conflict(format!("{} exists; rerun with --force to overwrite", p.display()))),
            None => Ok(()),
        }
    }

    /// Branched sweeps at each position. Writes the per-branch table and the
    /// curve, and returns the curve's path.
    pub fn sweep(&self, requested: &[u64]) -> Result<(Vec<CbsMeasurement>, PathBuf)> {
        let template = self.config.sweep_template()?;
        let handle = self.base_run()?;
        let positions = self.positions(&handle, requested)?;
        let dir = self.results_dir()?;
        let (sweep_path, curve_path) = (dir.join(SWEEP_FILE), dir.join(CURVE_FILE));
        self.claim(&[sweep_path.clone(), curve_path.clone()])?;
        let curve = measure_cbs_curve(self.task(), &handle, &positions, &template, &self.config.lr_schedule())?;
        write_file(&sweep_path, &sweep_csv(&curve)?)?;
        write_file(&curve_path, &curve_csv(&curve)?)?;
        Ok((curve, curve_path))
    }

    /// Two-batch noise-scale estimates at each position.
    pub fn noise(&self, requested: &[u64]) -> Result<(Vec<(u64, NoiseScaleEstimate)>, PathBuf)> {
        let n = self.config.noise();
        let handle = self.base_run()?;
        let positions = self.positions(&handle, requested)?;
        let path = self.results_dir()?.join(NOISE_FILE);
        self.claim(std::slice::from_ref(&path))?;
        let root = RngStream::from_seed(self.config.seed).child(b"noise");
        let mut rows = Vec::with_capacity(positions.len());
        for &tokens in &positions {
            let ckpt = load_checkpoint(&handle.find_checkpoint(tokens)?)?;
            ckpt.check_task(self.task())?;
            let rng = root.child_u64("checkpoint", tokens);
            let pairs = collect_pairs(self.task(), &ckpt.params, n.b_small, n.b_big, n.n_pairs, &rng)?;
            let mut est = estimate(&pairs)?;
            if n.level != 0.95 {
                (est.ci_low, est.ci_high) = confidence_interval(&pairs, n.level)?;
            }
            rows.push((tokens, est));
        }
        write_file(&path, &noise_csv(&rows)?)?;
        Ok((rows, path))
    }

    /// Three-arm comparison. Thresholds come from `curve_file`, or from this
    /// run's stored curve when `None`. Each arm is registered as its own run.
    pub fn warmup(&self, curve_file: Option<&Path>) -> Result<WarmupOutcome> {
        let Some(w) = self.config.warmup.clone() else {
            return Err(Error::Config("config has no [warmup] section".into()));
        };
        let dir = self.results_dir()?;
        let report_path = dir.join(WARMUP_REPORT_FILE);
        let plan_path = dir.join(WARMUP_PLAN_FILE);
        let run_id = self.run_id();
        let arm_runs: Vec<String> = ["warmup", "small_batch", "large_batch"]
            .iter()
            .map(|arm| format!("{run_id}-{arm}"))
            .collect();
        let mut claimed = vec![report_path.clone(), plan_path.clone()];
        claimed.extend(arm_runs.iter().map(|id| self.store.run_dir(id)));
        self.claim(&claimed)?;

        let mut plan = WarmupPlan {
            initial_batch: w.initial_batch,
            initial_lr: w.initial_lr.unwrap_or(self.config.lr.base_lr),
            rule: self.config.rule(),
            thresholds: Vec::new(),
            lr_warmup_tokens: w.lr_warmup_tokens,
        };
        let anneal_start = w.total_tokens - w.anneal_tokens;
        let init = Checkpoint::fresh(self.task(), self.config.optimizer, self.config.seed)?;
        if w.online {
            let [arm, ..] = build_arms(&plan, w.total_tokens, w.anneal_tokens)?;
            let sweep = self.config.sweep_template()?.base;
            let every = w.check_every.unwrap_or(sweep.window_tokens);
            let (_, _, schedule) = run_online(self.task(), init.clone(), &plan, &arm.lr, &sweep, every, w.max_doublings)?;
            plan.thresholds = schedule.segments()[1..].iter().map(|s| s.start_token).collect();
        } else {
            let curve = match curve_file {
                Some(path) => read_curve_file(path)?,
                None => read_curve_file(&dir.join(CURVE_FILE))?,
            };
            // Doubling inside the anneal tail would make the arms incomparable.
            let usable: Vec<CurvePoint> = curve.into_iter().filter(|p| p.checkpoint_tokens < anneal_start).collect();
            if usable.is_empty() {
                return Err(Error::invalid("no curve measurement falls before the anneal tail"));
            }
            plan.thresholds = thresholds_from_curve(&usable, w.initial_batch, w.max_doublings)?;
        }
        plan.validate()?;
        info!("warmup plan: batch {} doubling at {:?}", plan.initial_batch, plan.thresholds);

        let arms = build_arms(&plan, w.total_tokens, w.anneal_tokens)?;
        let run_config = ArmRunConfig {
            ema_alpha: self.config.train.ema_alpha,
            report_window: w.report_window,
            replicas: w.replicas,
        };
        let results = run_arms(self.task(), &init, &arms, &run_config)?;

        for (id, (arm, result)) in arm_runs.iter().zip(arms.iter().zip(&results)) {
            self.store.remove_run(id)?;
            let summary = format!(
                "{} arm: {} segments, final batch {}, anneal tail of {} tokens",
                arm.kind.name(),
                arm.schedule.segments().len(),
                arm.schedule.final_segment().batch_size,
                w.anneal_tokens
            );
            let mut handle =
                self.store
                    .register_run(id, &self.config_text, self.config.seed, self.config.task.clone(), summary)?;
            handle.write_log(&result.log)?;
            handle.save_checkpoint(&result.checkpoint)?;
            handle.set_status(RunStatus::Complete)?;
        }
        write_file(&plan_path, plan.to_toml()?.as_bytes())?;
        write_file(&report_path, &report_csv(&results)?)?;
        Ok(WarmupOutcome { plan, results, arm_runs, report_path })
    }
}

/// Fits a curve file and writes the report as JSON to
/// `results/<experiment>/analysis_<family>_<target>.json`.
pub fn analyze_curve_file(
    store: &RunStore,
    experiment: &str,
    curve_file: &Path,
    family: CurveFamily,
    target: FitTarget,
    horizon: f64,
    force: bool,
) -> Result<(AnalysisReport, PathBuf)> {
    let curve = read_curve_file(curve_file)?;
    let report = analyze(&curve, family, target, horizon)?;
    let name = format!("analysis_{}_{}.json", family_name(family), target_name(target));
    let path = store.results_dir(experiment)?.join(name);
    if path.exists() && !force {
        return Err(Error::Conflict(format!("{} exists; rerun with --force to overwrite", path.display())));
    }
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    write_file(&path, text.as_bytes())?;
    Ok((report, path))
}

fn family_name(family: CurveFamily) -> &'static str {
    match family {
        CurveFamily::Power => "power",
        CurveFamily::Log => "log",
    }
}

fn target_name(target: FitTarget) -> &'static str {
    match target {
        FitTarget::Lower => "lower",
        FitTarget::Point => "point",
    }
}

pub fn read_curve_file(path: &Path) -> Result<Vec<CurvePoint>> {
    match fs::read(path) {
        Ok(bytes) => read_curve_csv(&bytes),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::NotFound(format!(
            "curve file {} does not exist; run a sweep first",
            path.display()
        ))),
        Err(e) => Err(Error::io(path, e)),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    crate::engine::write_atomic(path, bytes)
}
