//! Stochastic loss landscapes.
//!
//! A task couples a data distribution with a differentiable per-example
//! loss. Batches are drawn i.i.d. from a caller-owned [`RngStream`], and
//! `loss_and_grad` is a pure function of `(params, batch)`, so any number of
//! branches can evaluate the same task concurrently.

mod mlp;
mod quadratic;
mod tiny_lm;

pub use mlp::{Activation, MlpTask, MlpTaskSpec};
pub use quadratic::{analytic_noise_scale, QuadraticTask, QuadraticTaskSpec};
pub use tiny_lm::{TinyLmTask, TinyLmTaskSpec};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Task-specific batch payload.
#[derive(Clone, Debug, PartialEq)]
pub enum Examples {
    /// Gradient noise draws ξ, `size × dimension`, row-major.
    Noise(Vec<f64>),
    /// Feature rows `size × input_dim` and class labels.
    Labeled { inputs: Vec<f64>, labels: Vec<u32> },
    /// Token sequences, `size × (context_len + 1)`, row-major.
    Sequences(Vec<u32>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    examples: Examples,
    size: usize,
    tokens_per_example: u64,
}

impl Batch {
    pub(crate) fn new(examples: Examples, size: usize, tokens_per_example: u64) -> Self {
        Self {
            examples,
            size,
            tokens_per_example,
        }
    }

    pub fn examples(&self) -> &Examples {
        &self.examples
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn token_count(&self) -> u64 {
        self.size as u64 * self.tokens_per_example
    }

    /// Splits into the first `at` examples and the rest.
    pub fn split_at(&self, at: usize) -> Result<(Batch, Batch)> {
        if at == 0 || at >= self.size {
            return Err(Error::invalid(format!(
                "split point {at} must lie strictly inside a batch of {}",
                self.size
            )));
        }
        let (head, tail) = match &self.examples {
            Examples::Noise(xs) => {
                let row = xs.len() / self.size;
                let (a, b) = xs.split_at(at * row);
                (Examples::Noise(a.to_vec()), Examples::Noise(b.to_vec()))
            }
            Examples::Labeled { inputs, labels } => {
                let row = inputs.len() / self.size;
                let (a, b) = inputs.split_at(at * row);
                let (la, lb) = labels.split_at(at);
                (
                    Examples::Labeled {
                        inputs: a.to_vec(),
                        labels: la.to_vec(),
                    },
                    Examples::Labeled {
                        inputs: b.to_vec(),
                        labels: lb.to_vec(),
                    },
                )
            }
            Examples::Sequences(toks) => {
                let row = toks.len() / self.size;
                let (a, b) = toks.split_at(at * row);
                (Examples::Sequences(a.to_vec()), Examples::Sequences(b.to_vec()))
            }
        };
        Ok((
            Batch::new(head, at, self.tokens_per_example),
            Batch::new(tail, self.size - at, self.tokens_per_example),
        ))
    }
}

/// A stochastic gradient oracle.
pub trait Task: Send + Sync {
    fn dimension(&self) -> usize;

    fn tokens_per_example(&self) -> u64;

    /// Initial parameters. Implementations draw only from `rng`.
    fn init_params(&self, rng: &mut RngStream) -> Vec<f64>;

    fn sample_batch(&self, rng: &mut RngStream, size: usize) -> Result<Batch>;

    /// Batch-mean loss and gradient.
    fn loss_and_grad(&self, params: &[f64], batch: &Batch) -> Result<(f64, Vec<f64>)>;

    /// Stable 64-bit identity of the task definition, stored in checkpoints.
    fn fingerprint(&self) -> u64;
}

/// Declarative task description as it appears in experiment configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskSpec {
    Quadratic(QuadraticTaskSpec),
    Mlp(MlpTaskSpec),
    TinyLm(TinyLmTaskSpec),
}

impl TaskSpec {
    pub fn build(&self) -> Result<Box<dyn Task>> {
        Ok(match self {
            TaskSpec::Quadratic(spec) => Box::new(QuadraticTask::new(spec.clone())?),
            TaskSpec::Mlp(spec) => Box::new(MlpTask::new(spec.clone())?),
            TaskSpec::TinyLm(spec) => Box::new(TinyLmTask::new(spec.clone())?),
        })
    }

    pub fn fingerprint(&self) -> u64 {
        fingerprint_of(self)
    }
}

pub(crate) fn fingerprint_of<T: Serialize>(value: &T) -> u64 {
    let json = serde_json::to_vec(value).expect("task specs always serialize");
    let digest = Sha256::digest(&json);
    u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
}

pub(crate) fn check_batch_size(size: usize) -> Result<()> {
    if size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    Ok(())
}

pub(crate) fn check_dimension(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::invalid(format!(
            "parameter vector has {got} entries, task expects {expected}"
        )));
    }
    Ok(())
}

/// Numerically stable log-softmax cross-entropy. Writes softmax
/// probabilities into `probs` and returns `-log p[label]`.
pub(crate) fn softmax_xent(logits: &[f64], label: usize, probs: &mut [f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (p, &z) in probs.iter_mut().zip(logits) {
        *p = (z - max).exp();
        total += *p;
    }
    for p in probs.iter_mut() {
        *p /= total;
    }
    -(logits[label] - max - total.ln())
}
