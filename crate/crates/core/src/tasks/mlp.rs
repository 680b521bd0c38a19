use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    check_batch_size, check_dimension, fingerprint_of, softmax_xent, Batch, Examples, Task,
};
use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation and the output.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Classifier on a synthetic teacher distribution.
///
/// Inputs are standard normal. A linear teacher drawn from `data_seed`
/// ranks the classes; the label is uniform over the teacher's top
/// `label_support` classes. The Bayes-optimal loss is therefore exactly
/// `ln(label_support)` with zero per-example variance, while per-example
/// gradients stay noisy at the optimum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpTaskSpec {
    /// Hidden layer widths, input to output.
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub data_seed: u64,
    pub input_dim: usize,
    pub num_classes: usize,
    #[serde(default = "default_support")]
    pub label_support: usize,
    #[serde(default = "one")]
    pub tokens_per_example: u64,
}

fn default_support() -> usize {
    2
}

fn one() -> u64 {
    1
}

impl MlpTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes < 2 {
            return Err(Error::invalid(
                "mlp needs a positive input_dim and at least two classes",
            ));
        }
        if self.layer_widths.contains(&0) {
            return Err(Error::invalid("mlp layer widths must be positive"));
        }
        if self.label_support == 0 || self.label_support > self.num_classes {
            return Err(Error::invalid("label_support must be in 1..=num_classes"));
        }
        if self.tokens_per_example == 0 {
            return Err(Error::invalid("tokens_per_example must be positive"));
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.layer_widths);
        w.push(self.num_classes);
        w
    }
}

#[derive(Clone, Debug)]
struct Layer {
    fan_in: usize,
    fan_out: usize,
    weight_offset: usize,
    bias_offset: usize,
}

#[derive(Clone, Debug)]
pub struct MlpTask {
    spec: MlpTaskSpec,
    layers: Vec<Layer>,
    dimension: usize,
    teacher: Vec<f64>,
    fingerprint: u64,
}

impl MlpTask {
    pub fn new(spec: MlpTaskSpec) -> Result<Self> {
        spec.validate()?;
        let widths = spec.widths();
        let mut layers = Vec::new();
        let mut offset = 0;
        for pair in widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            layers.push(Layer {
                fan_in,
                fan_out,
                weight_offset: offset,
                bias_offset: offset + fan_in * fan_out,
            });
            offset += fan_in * fan_out + fan_out;
        }
        let mut data_rng = RngStream::from_seed(spec.data_seed).child(b"mlp-teacher");
        let teacher = (0..spec.num_classes * spec.input_dim)
            .map(|_| StandardNormal.sample(&mut data_rng))
            .collect();
        let fingerprint = fingerprint_of(&("mlp", &spec));
        Ok(Self {
            spec,
            layers,
            dimension: offset,
            teacher,
            fingerprint,
        })
    }

    pub fn spec(&self) -> &MlpTaskSpec {
        &self.spec
    }

    /// The teacher's admissible label set for an input, highest score first.
    fn support(&self, x: &[f64]) -> Vec<usize> {
        let d = self.spec.input_dim;
        let mut scored: Vec<(f64, usize)> = self
            .teacher
            .chunks_exact(d)
            .enumerate()
            .map(|(c, w)| (w.iter().zip(x).map(|(a, b)| a * b).sum(), c))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        scored
            .into_iter()
            .take(self.spec.label_support)
            .map(|(_, c)| c)
            .collect()
    }

    /// Forward pass for one input; returns per-layer (pre, post) activations.
    fn forward(&self, params: &[f64], x: &[f64]) -> Vec<(Vec<f64>, Vec<f64>)> {
        let act = self.spec.activation;
        let last = self.layers.len() - 1;
        let mut trace = Vec::with_capacity(self.layers.len());
        let mut input = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let w = &params[layer.weight_offset..layer.bias_offset];
            let b = &params[layer.bias_offset..layer.bias_offset + layer.fan_out];
            let pre: Vec<f64> = (0..layer.fan_out)
                .map(|o| {
                    let row = &w[o * layer.fan_in..(o + 1) * layer.fan_in];
                    b[o] + row.iter().zip(&input).map(|(a, v)| a * v).sum::<f64>()
                })
                .collect();
            let post = if l == last {
                pre.clone()
            } else {
                pre.iter().map(|&z| act.apply(z)).collect()
            };
            input = post.clone();
            trace.push((pre, post));
        }
        trace
    }
}

impl Task for MlpTask {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn tokens_per_example(&self) -> u64 {
        self.spec.tokens_per_example
    }

    fn init_params(&self, rng: &mut RngStream) -> Vec<f64> {
        let mut params = vec![0.0; self.dimension];
        for layer in &self.layers {
            let scale = 1.0 / (layer.fan_in as f64).sqrt();
            for p in &mut params[layer.weight_offset..layer.bias_offset] {
                let z: f64 = StandardNormal.sample(rng);
                *p = scale * z;
            }
        }
        params
    }

    fn sample_batch(&self, rng: &mut RngStream, size: usize) -> Result<Batch> {
        check_batch_size(size)?;
        let d = self.spec.input_dim;
        let mut inputs = Vec::with_capacity(size * d);
        let mut labels = Vec::with_capacity(size);
        for _ in 0..size {
            let x: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut *rng)).collect();
            let support = self.support(&x);
            let pick = rng.random_range(0..support.len());
            labels.push(support[pick] as u32);
            inputs.extend(x);
        }
        Ok(Batch::new(
            Examples::Labeled { inputs, labels },
            size,
            self.spec.tokens_per_example,
        ))
    }

    fn loss_and_grad(&self, params: &[f64], batch: &Batch) -> Result<(f64, Vec<f64>)> {
        check_dimension(self.dimension, params.len())?;
        let Examples::Labeled { inputs, labels } = batch.examples() else {
            return Err(Error::invalid("mlp task needs a labeled batch"));
        };
        let d = self.spec.input_dim;
        if inputs.len() != batch.size() * d || labels.len() != batch.size() {
            return Err(Error::invalid("labeled batch has the wrong shape"));
        }
        let act = self.spec.activation;
        let mut grad = vec![0.0; self.dimension];
        let mut loss = 0.0;
        let mut probs = vec![0.0; self.spec.num_classes];
        for (x, &label) in inputs.chunks_exact(d).zip(labels) {
            let label = label as usize;
            if label >= self.spec.num_classes {
                return Err(Error::invalid(format!("label {label} out of range")));
            }
            let trace = self.forward(params, x);
            let logits = &trace.last().expect("at least one layer").1;
            loss += softmax_xent(logits, label, &mut probs);

            let mut delta: Vec<f64> = probs.clone();
            delta[label] -= 1.0;
            for l in (0..self.layers.len()).rev() {
                let layer = &self.layers[l];
                let input: &[f64] = if l == 0 { x } else { &trace[l - 1].1 };
                for o in 0..layer.fan_out {
                    let row = layer.weight_offset + o * layer.fan_in;
                    for (i, v) in input.iter().enumerate() {
                        grad[row + i] += delta[o] * v;
                    }
                    grad[layer.bias_offset + o] += delta[o];
                }
                if l == 0 {
                    break;
                }
                let w = &params[layer.weight_offset..layer.bias_offset];
                let (pre, post) = &trace[l - 1];
                let mut next = vec![0.0; layer.fan_in];
                for o in 0..layer.fan_out {
                    let row = &w[o * layer.fan_in..(o + 1) * layer.fan_in];
                    for (n, wv) in next.iter_mut().zip(row) {
                        *n += delta[o] * wv;
                    }
                }
                for (i, n) in next.iter_mut().enumerate() {
                    *n *= act.derivative(pre[i], post[i]);
                }
                delta = next;
            }
        }
        let n = batch.size() as f64;
        for g in &mut grad {
            *g /= n;
        }
        Ok((loss / n, grad))
    }

    fn fingerprint(&self) -> u64 {
        self.fingerprint
    }
}
