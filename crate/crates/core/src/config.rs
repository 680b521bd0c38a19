//! Experiment configuration, read from TOML.
//!
//! Everything that shapes an experiment lives here: the task, optimizer,
//! base run, sweep template, noise-scale protocol and warmup comparison.
//! Unknown keys anywhere are rejected.

use serde::{Deserialize, Serialize};

use crate::cbs_meter::{MultiplierGroup, SweepConfig, SweepTemplate, DEFAULT_TOLERANCE};
use crate::engine::DEFAULT_EMA_ALPHA;
use crate::error::{Error, Result};
use crate::noise_scale::{DEFAULT_B_BIG, DEFAULT_B_SMALL, DEFAULT_LEVEL, DEFAULT_N_PAIRS};
use crate::optim::{AdamHyper, LrKind, LrSchedule, OptimizerKind, ScalingRule};
use crate::tasks::TaskSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Names the base run under `runs/`.
    pub name: String,
    pub seed: u64,
    pub task: TaskSpec,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerKind,
    pub lr: LrConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub noise: Option<NoiseSection>,
    #[serde(default)]
    pub warmup: Option<WarmupSection>,
}

fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Adam(AdamHyper::default())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrConfig {
    #[serde(default = "default_lr_kind")]
    pub kind: LrKind,
    pub base_lr: f64,
    #[serde(default)]
    pub warmup_tokens: u64,
    /// Schedule length. Defaults to the token budget plus one sweep window,
    /// so branches from the last checkpoint stay inside the schedule.
    #[serde(default)]
    pub total_tokens: Option<u64>,
    #[serde(default)]
    pub anneal_tokens: u64,
}

fn default_lr_kind() -> LrKind {
    LrKind::Constant
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub token_budget: u64,
    /// Token positions to checkpoint. Each must fall on a step boundary,
    /// i.e. be a multiple of `batch_size` times the task's tokens per example.
    pub checkpoints: Vec<u64>,
    #[serde(default = "default_alpha")]
    pub ema_alpha: f64,
}

fn default_alpha() -> f64 {
    DEFAULT_EMA_ALPHA
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub multipliers: Vec<f64>,
    /// Defaults to 2% of the token budget.
    #[serde(default)]
    pub window_tokens: Option<u64>,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    /// Defaults to the optimizer's conventional rule.
    #[serde(default)]
    pub rule: Option<ScalingRule>,
    #[serde(default = "one")]
    pub replicas: usize,
    #[serde(default)]
    pub max_loss: Option<f64>,
    /// Per-checkpoint multiplier grids overriding `multipliers`.
    #[serde(default)]
    pub groups: Vec<MultiplierGroup>,
}

fn default_tolerance() -> f64 {
    DEFAULT_TOLERANCE
}

fn one() -> usize {
    1
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    #[serde(default = "default_b_small")]
    pub b_small: usize,
    #[serde(default = "default_b_big")]
    pub b_big: usize,
    #[serde(default = "default_n_pairs")]
    pub n_pairs: usize,
    #[serde(default = "default_level")]
    pub level: f64,
}

impl Default for NoiseSection {
    fn default() -> Self {
        Self {
            b_small: DEFAULT_B_SMALL,
            b_big: DEFAULT_B_BIG,
            n_pairs: DEFAULT_N_PAIRS,
            level: DEFAULT_LEVEL,
        }
    }
}

fn default_b_small() -> usize {
    DEFAULT_B_SMALL
}
fn default_b_big() -> usize {
    DEFAULT_B_BIG
}
fn default_n_pairs() -> usize {
    DEFAULT_N_PAIRS
}
fn default_level() -> f64 {
    DEFAULT_LEVEL
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarmupSection {
    pub initial_batch: usize,
    /// Defaults to the base run's learning rate.
    #[serde(default)]
    pub initial_lr: Option<f64>,
    pub max_doublings: usize,
    pub total_tokens: u64,
    pub anneal_tokens: u64,
    #[serde(default)]
    pub lr_warmup_tokens: u64,
    #[serde(default)]
    pub report_window: u64,
    #[serde(default = "one")]
    pub replicas: usize,
    /// Decide doublings during training from fresh measurements instead of
    /// the stored curve. Experimental.
    #[serde(default)]
    pub online: bool,
    /// Measurement interval for online doubling.
    #[serde(default)]
    pub check_every: Option<u64>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn window_tokens(&self) -> u64 {
        self.sweep
            .as_ref()
            .and_then(|s| s.window_tokens)
            .unwrap_or(self.train.token_budget / 50)
    }

    pub fn rule(&self) -> ScalingRule {
        self.sweep
            .as_ref()
            .and_then(|s| s.rule)
            .unwrap_or_else(|| self.optimizer.natural_rule())
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        let total = self
            .lr
            .total_tokens
            .unwrap_or(self.train.token_budget + self.window_tokens());
        LrSchedule {
            kind: self.lr.kind,
            base_lr: self.lr.base_lr,
            warmup_tokens: self.lr.warmup_tokens,
            total_tokens: total,
            anneal_tokens: self.lr.anneal_tokens,
        }
    }

    pub fn sweep_template(&self) -> Result<SweepTemplate> {
        let Some(s) = &self.sweep else {
            return Err(Error::Config("config has no [sweep] section".into()));
        };
        let base = SweepConfig {
            multipliers: s.multipliers.clone(),
            window_tokens: self.window_tokens(),
            tolerance: s.tolerance,
            rule: self.rule(),
            base_batch: self.train.batch_size,
            ema_alpha: self.train.ema_alpha,
            replicas: s.replicas,
            max_loss: s.max_loss,
        };
        Ok(SweepTemplate { base, groups: s.groups.clone() })
    }

    pub fn noise(&self) -> NoiseSection {
        self.noise.unwrap_or_default()
    }

    pub fn validate(&self) -> Result<()> {
        let task = self.task.build()?;
        if let OptimizerKind::Adam(h) = &self.optimizer {
            h.validate()?;
        }
        let t = &self.train;
        if t.batch_size == 0 || t.token_budget == 0 {
            return Err(Error::Config("train.batch_size and train.token_budget must be positive".into()));
        }
        if !(t.ema_alpha > 0.0 && t.ema_alpha <= 1.0) {
            return Err(Error::Config("train.ema_alpha must be in (0, 1]".into()));
        }
        if t.checkpoints.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config("train.checkpoints must be strictly increasing".into()));
        }
        if t.checkpoints.last().is_some_and(|&c| c > t.token_budget) {
            return Err(Error::Config("checkpoints must not exceed the token budget".into()));
        }
        let step = t.batch_size as u64 * task.tokens_per_example();
        if let Some(c) = t.checkpoints.iter().find(|&&c| c % step != 0) {
            return Err(Error::Config(format!("checkpoint {c} is not a multiple of the {step}-token step")));
        }
        let lr = self.lr_schedule();
        lr.validate()?;
        if lr.total_tokens < t.token_budget.div_ceil(step) * step {
            return Err(Error::Config("lr schedule ends before the token budget".into()));
        }
        if let Some(s) = &self.sweep {
            let template = self.sweep_template()?;
            let check = |config: &SweepConfig| config.validate(task.tokens_per_example());
            check(&template.base)?;
            for g in &s.groups {
                check(&SweepConfig { multipliers: g.multipliers.clone(), ..template.base.clone() })?;
                if let Some(c) = g.checkpoints.iter().find(|c| !t.checkpoints.contains(c)) {
                    return Err(Error::Config(format!("sweep group names unknown checkpoint {c}")));
                }
            }
            let last = t.checkpoints.last().copied().unwrap_or(0);
            if last + template.base.window_tokens > lr.total_tokens {
                return Err(Error::Config(format!(
                    "a sweep from the last checkpoint ({last} tokens) runs past the lr schedule end {}",
                    lr.total_tokens
                )));
            }
        }
        let n = self.noise();
        if n.b_small == 0 || n.b_small >= n.b_big || n.n_pairs < 2 || !(n.level > 0.0 && n.level < 1.0) {
            return Err(Error::Config("noise needs 0 < b_small < b_big, n_pairs ≥ 2, level in (0, 1)".into()));
        }
        if let Some(w) = &self.warmup {
            if w.initial_batch == 0 || w.anneal_tokens == 0 || w.anneal_tokens > w.total_tokens {
                return Err(Error::Config("warmup needs a positive batch and 0 < anneal_tokens ≤ total_tokens".into()));
            }
            if w.replicas == 0 {
                return Err(Error::Config("warmup.replicas must be at least 1".into()));
            }
            if w.online && self.sweep.is_none() {
                return Err(Error::Config("online warmup needs a [sweep] section".into()));
            }
            if w.initial_lr.is_some_and(|lr| !(lr > 0.0)) {
                return Err(Error::Config("warmup.initial_lr must be positive".into()));
            }
        }
        Ok(())
    }
}
