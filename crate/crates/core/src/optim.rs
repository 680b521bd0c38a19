//! Optimizers, base learning-rate schedules, and batch-size scaling rules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Adam hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamHyper {
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.95
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

impl AdamHyper {
    pub fn validate(&self) -> Result<()> {
        let beta_ok = |b: f64| (0.0..1.0).contains(&b);
        if !beta_ok(self.beta1) || !beta_ok(self.beta2) {
            return Err(Error::invalid("adam betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid("adam eps must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam(AdamHyper),
}

impl OptimizerKind {
    /// The scaling rule that conventionally pairs with this optimizer.
    pub fn natural_rule(&self) -> ScalingRule {
        match self {
            OptimizerKind::Sgd => ScalingRule::Linear,
            OptimizerKind::Adam(_) => ScalingRule::Sqrt,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step_count: u64,
    /// Empty for SGD.
    pub first_moment: Vec<f64>,
    /// Empty for SGD.
    pub second_moment: Vec<f64>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, dimension: usize) -> Result<Self> {
        let moments = match kind {
            OptimizerKind::Sgd => 0,
            OptimizerKind::Adam(hyper) => {
                hyper.validate()?;
                dimension
            }
        };
        Ok(Self {
            kind,
            step_count: 0,
            first_moment: vec![0.0; moments],
            second_moment: vec![0.0; moments],
        })
    }

    pub fn sgd(dimension: usize) -> Self {
        Self::new(OptimizerKind::Sgd, dimension).expect("sgd has no hyperparameters")
    }

    pub fn adam(hyper: AdamHyper, dimension: usize) -> Result<Self> {
        Self::new(OptimizerKind::Adam(hyper), dimension)
    }

    /// Applies one update in place.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        match self.kind {
            OptimizerKind::Sgd => sgd_step(self, params, grad, lr),
            OptimizerKind::Adam(_) => adam_step(self, params, grad, lr),
        }
    }
}

fn check_step_inputs(params: &[f64], grad: &[f64], lr: f64) -> Result<()> {
    if params.len() != grad.len() {
        return Err(Error::invalid(format!(
            "gradient has {} entries, parameters have {}",
            grad.len(),
            params.len()
        )));
    }
    if !(lr >= 0.0) || !lr.is_finite() {
        return Err(Error::invalid(format!("learning rate {lr} must be finite and ≥ 0")));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::numeric(format!("gradient entry {i} is {}", grad[i])));
    }
    Ok(())
}

/// `params ← params − lr·grad`.
pub fn sgd_step(
    state: &mut OptimizerState,
    params: &mut [f64],
    grad: &[f64],
    lr: f64,
) -> Result<()> {
    check_step_inputs(params, grad, lr)?;
    for (p, g) in params.iter_mut().zip(grad) {
        *p -= lr * g;
    }
    state.step_count += 1;
    Ok(())
}

/// Bias-corrected Adam. Moments are updated before the parameter step.
pub fn adam_step(
    state: &mut OptimizerState,
    params: &mut [f64],
    grad: &[f64],
    lr: f64,
) -> Result<()> {
    let OptimizerKind::Adam(AdamHyper { beta1, beta2, eps }) = state.kind else {
        return Err(Error::invalid("adam_step called on a non-adam state"));
    };
    check_step_inputs(params, grad, lr)?;
    if state.first_moment.len() != params.len() || state.second_moment.len() != params.len() {
        return Err(Error::invalid("adam moments do not match the parameter dimension"));
    }
    if let Some(i) = params.iter().position(|p| !p.is_finite()) {
        return Err(Error::numeric(format!("parameter entry {i} is {}", params[i])));
    }
    let t = state.step_count + 1;
    let bias1 = 1.0 - beta1.powf(t as f64);
    let bias2 = 1.0 - beta2.powf(t as f64);
    for i in 0..params.len() {
        let g = grad[i];
        let m = beta1 * state.first_moment[i] + (1.0 - beta1) * g;
        let v = beta2 * state.second_moment[i] + (1.0 - beta2) * g * g;
        state.first_moment[i] = m;
        state.second_moment[i] = v;
        let m_hat = m / bias1;
        let v_hat = v / bias2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    state.step_count = t;
    Ok(())
}

/// Factor applied to the learning rate when the batch grows by `k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingRule {
    Linear,
    Sqrt,
}

impl ScalingRule {
    pub fn factor(self, k: f64) -> Result<f64> {
        if !(k > 0.0) || !k.is_finite() {
            return Err(Error::invalid(format!("batch multiplier {k} must be positive")));
        }
        Ok(match self {
            ScalingRule::Linear => k,
            ScalingRule::Sqrt => k.sqrt(),
        })
    }
}

impl std::fmt::Display for ScalingRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScalingRule::Linear => "linear",
            ScalingRule::Sqrt => "sqrt",
        })
    }
}

pub fn scale_lr(rule: ScalingRule, k: f64, base_lr: f64) -> Result<f64> {
    Ok(rule.factor(k)? * base_lr)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrKind {
    /// `base_lr` after warmup.
    Constant,
    /// Linear warmup, then half-cosine decay reaching zero at `total_tokens`.
    Cosine,
    /// Warmup and constant plateau, then a linear decay to zero over the
    /// final `anneal_tokens`.
    LinearAnnealTail,
}

/// Base learning rate as a function of tokens seen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub kind: LrKind,
    pub base_lr: f64,
    #[serde(default)]
    pub warmup_tokens: u64,
    pub total_tokens: u64,
    #[serde(default)]
    pub anneal_tokens: u64,
}

impl LrSchedule {
    pub fn constant(base_lr: f64, total_tokens: u64) -> Self {
        Self {
            kind: LrKind::Constant,
            base_lr,
            warmup_tokens: 0,
            total_tokens,
            anneal_tokens: 0,
        }
    }

    pub fn cosine(base_lr: f64, warmup_tokens: u64, total_tokens: u64) -> Self {
        Self {
            kind: LrKind::Cosine,
            base_lr,
            warmup_tokens,
            total_tokens,
            anneal_tokens: 0,
        }
    }

    pub fn anneal_tail(base_lr: f64, warmup_tokens: u64, total_tokens: u64, anneal_tokens: u64) -> Self {
        Self {
            kind: LrKind::LinearAnnealTail,
            base_lr,
            warmup_tokens,
            total_tokens,
            anneal_tokens,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || !self.base_lr.is_finite() {
            return Err(Error::invalid("base_lr must be positive"));
        }
        if self.total_tokens == 0 {
            return Err(Error::invalid("total_tokens must be positive"));
        }
        if self.warmup_tokens > self.total_tokens {
            return Err(Error::invalid("warmup_tokens exceeds total_tokens"));
        }
        if self.kind == LrKind::LinearAnnealTail
            && (self.anneal_tokens == 0
                || self.anneal_tokens + self.warmup_tokens > self.total_tokens)
        {
            return Err(Error::invalid(
                "anneal_tokens must be positive and fit after warmup",
            ));
        }
        Ok(())
    }

    /// Token position where the anneal tail begins.
    pub fn anneal_start(&self) -> u64 {
        match self.kind {
            LrKind::LinearAnnealTail => self.total_tokens - self.anneal_tokens,
            _ => self.total_tokens,
        }
    }

    pub fn with_total_tokens(mut self, total_tokens: u64) -> Self {
        self.total_tokens = total_tokens;
        self
    }
}

pub fn lr_at(schedule: &LrSchedule, tokens: u64) -> Result<f64> {
    if tokens > schedule.total_tokens {
        return Err(Error::OutOfRange(format!(
            "token position {tokens} is past the schedule end {}",
            schedule.total_tokens
        )));
    }
    let base = schedule.base_lr;
    let warm = schedule.warmup_tokens;
    if tokens < warm {
        return Ok(base * tokens as f64 / warm as f64);
    }
    Ok(match schedule.kind {
        LrKind::Constant => base,
        LrKind::Cosine => {
            let span = (schedule.total_tokens - warm) as f64;
            let progress = if span == 0.0 {
                1.0
            } else {
                (tokens - warm) as f64 / span
            };
            0.5 * base * (1.0 + (std::f64::consts::PI * progress).cos())
        }
        LrKind::LinearAnnealTail => {
            let start = schedule.anneal_start();
            if tokens < start {
                base
            } else {
                let progress = (tokens - start) as f64 / schedule.anneal_tokens as f64;
                base * (1.0 - progress)
            }
        }
    })
}
