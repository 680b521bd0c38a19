use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{
    check_batch_size, check_dimension, fingerprint_of, softmax_xent, Batch, Examples, Task,
};
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Next-token prediction on a seeded Markov source.
///
/// Each token has `successors` admissible next tokens drawn from
/// `corpus_seed`, chosen uniformly. The model embeds the current token,
/// adds a gated causal mean of the prefix embeddings, applies `num_layers`
/// residual tanh blocks and projects back to the vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TinyLmTaskSpec {
    pub vocab_size: usize,
    pub context_len: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub corpus_seed: u64,
    #[serde(default = "default_successors")]
    pub successors: usize,
}

fn default_successors() -> usize {
    2
}

impl TinyLmTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.context_len == 0 || self.embed_dim == 0 {
            return Err(Error::invalid(
                "tiny lm needs vocab_size ≥ 2 and positive context_len, embed_dim",
            ));
        }
        if self.successors == 0 || self.successors > self.vocab_size {
            return Err(Error::invalid("successors must be in 1..=vocab_size"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Layout {
    embed: usize,
    gate: usize,
    blocks: usize,
    unembed: usize,
    out_bias: usize,
    total: usize,
}

impl Layout {
    fn new(v: usize, e: usize, layers: usize) -> Self {
        let embed = 0;
        let gate = embed + v * e;
        let blocks = gate + e;
        let unembed = blocks + layers * (e * e + e);
        let out_bias = unembed + v * e;
        Self {
            embed,
            gate,
            blocks,
            unembed,
            out_bias,
            total: out_bias + v,
        }
    }

    fn block(&self, l: usize, e: usize) -> (usize, usize) {
        let w = self.blocks + l * (e * e + e);
        (w, w + e * e)
    }
}

#[derive(Clone, Debug)]
pub struct TinyLmTask {
    spec: TinyLmTaskSpec,
    layout: Layout,
    transitions: Vec<Vec<u32>>,
    fingerprint: u64,
}

impl TinyLmTask {
    pub fn new(spec: TinyLmTaskSpec) -> Result<Self> {
        spec.validate()?;
        let layout = Layout::new(spec.vocab_size, spec.embed_dim, spec.num_layers);
        let mut corpus_rng = RngStream::from_seed(spec.corpus_seed).child(b"markov-source");
        let mut tokens: Vec<u32> = (0..spec.vocab_size as u32).collect();
        let transitions = (0..spec.vocab_size)
            .map(|_| {
                tokens.shuffle(&mut corpus_rng);
                let mut next = tokens[..spec.successors].to_vec();
                next.sort_unstable();
                next
            })
            .collect();
        let fingerprint = fingerprint_of(&("tiny_lm", &spec));
        Ok(Self {
            spec,
            layout,
            transitions,
            fingerprint,
        })
    }

    pub fn spec(&self) -> &TinyLmTaskSpec {
        &self.spec
    }

    /// Entropy rate of the source in nats: the loss floor.
    pub fn entropy_rate(&self) -> f64 {
        (self.spec.successors as f64).ln()
    }

    fn sequence_loss_and_grad(&self, params: &[f64], seq: &[u32], grad: &mut [f64]) -> f64 {
        let e = self.spec.embed_dim;
        let v = self.spec.vocab_size;
        let layers = self.spec.num_layers;
        let len = self.spec.context_len;
        let lay = self.layout;
        let embedding = |tok: u32| &params[lay.embed + tok as usize * e..][..e];
        let gate = &params[lay.gate..lay.gate + e];

        // Forward, keeping every residual stream state.
        let mut prefix = vec![0.0; e];
        let mut means = Vec::with_capacity(len);
        // states[t][l] is the input to block l; states[t][layers] feeds the head.
        let mut states: Vec<Vec<Vec<f64>>> = Vec::with_capacity(len);
        let mut acts: Vec<Vec<Vec<f64>>> = Vec::with_capacity(len);
        for t in 0..len {
            let emb = embedding(seq[t]);
            for (p, x) in prefix.iter_mut().zip(emb) {
                *p += x;
            }
            let mean: Vec<f64> = prefix.iter().map(|p| p / (t + 1) as f64).collect();
            let mut h: Vec<f64> = (0..e).map(|i| emb[i] + gate[i] * mean[i]).collect();
            let mut s = Vec::with_capacity(layers + 1);
            let mut a_t = Vec::with_capacity(layers);
            for l in 0..layers {
                let (w_off, b_off) = lay.block(l, e);
                let a: Vec<f64> = (0..e)
                    .map(|o| {
                        let row = &params[w_off + o * e..w_off + (o + 1) * e];
                        let z = params[b_off + o]
                            + row.iter().zip(&h).map(|(w, x)| w * x).sum::<f64>();
                        z.tanh()
                    })
                    .collect();
                s.push(h.clone());
                for (hi, ai) in h.iter_mut().zip(&a) {
                    *hi += ai;
                }
                a_t.push(a);
            }
            s.push(h);
            states.push(s);
            acts.push(a_t);
            means.push(mean);
        }

        let mut loss = 0.0;
        let mut logits = vec![0.0; v];
        let mut probs = vec![0.0; v];
        let mut grad_mean = vec![vec![0.0; e]; len];
        for t in 0..len {
            let h = &states[t][layers];
            for (c, z) in logits.iter_mut().enumerate() {
                let row = &params[lay.unembed + c * e..lay.unembed + (c + 1) * e];
                *z = params[lay.out_bias + c] + row.iter().zip(h).map(|(w, x)| w * x).sum::<f64>();
            }
            let target = seq[t + 1] as usize;
            loss += softmax_xent(&logits, target, &mut probs);
            probs[target] -= 1.0;

            let mut dh = vec![0.0; e];
            for c in 0..v {
                let dz = probs[c];
                let row = lay.unembed + c * e;
                for i in 0..e {
                    grad[row + i] += dz * h[i];
                    dh[i] += dz * params[row + i];
                }
                grad[lay.out_bias + c] += dz;
            }
            for l in (0..layers).rev() {
                let (w_off, b_off) = lay.block(l, e);
                let input = &states[t][l];
                let a = &acts[t][l];
                let dz: Vec<f64> = (0..e).map(|o| dh[o] * (1.0 - a[o] * a[o])).collect();
                for o in 0..e {
                    let row = w_off + o * e;
                    for i in 0..e {
                        grad[row + i] += dz[o] * input[i];
                        dh[i] += dz[o] * params[row + i];
                    }
                    grad[b_off + o] += dz[o];
                }
            }
            // h0 = emb[x_t] + gate ⊙ mean_t
            let tok = seq[t] as usize;
            for i in 0..e {
                grad[lay.embed + tok * e + i] += dh[i];
                grad[lay.gate + i] += dh[i] * means[t][i];
                grad_mean[t][i] = dh[i] * gate[i] / (t + 1) as f64;
            }
        }
        // mean_t averages embeddings 0..=t, so embedding s receives the
        // suffix sum of the scaled mean gradients.
        let mut suffix = vec![0.0; e];
        for s in (0..len).rev() {
            for i in 0..e {
                suffix[i] += grad_mean[s][i];
            }
            let tok = seq[s] as usize;
            for i in 0..e {
                grad[lay.embed + tok * e + i] += suffix[i];
            }
        }
        loss
    }
}

impl Task for TinyLmTask {
    fn dimension(&self) -> usize {
        self.layout.total
    }

    fn tokens_per_example(&self) -> u64 {
        self.spec.context_len as u64
    }

    fn init_params(&self, rng: &mut RngStream) -> Vec<f64> {
        let e = self.spec.embed_dim;
        let lay = self.layout;
        let mut params = vec![0.0; lay.total];
        let mut fill = |range: std::ops::Range<usize>, scale: f64, rng: &mut RngStream| {
            for p in &mut params[range] {
                let z: f64 = StandardNormal.sample(rng);
                *p = scale * z;
            }
        };
        let inv = 1.0 / (e as f64).sqrt();
        fill(lay.embed..lay.gate, 1.0, rng);
        for l in 0..self.spec.num_layers {
            let (w, b) = lay.block(l, e);
            fill(w..b, 0.5 * inv, rng);
        }
        fill(lay.unembed..lay.out_bias, inv, rng);
        params
    }

    fn sample_batch(&self, rng: &mut RngStream, size: usize) -> Result<Batch> {
        check_batch_size(size)?;
        let width = self.spec.context_len + 1;
        let mut tokens = Vec::with_capacity(size * width);
        for _ in 0..size {
            let mut tok = rng.random_range(0..self.spec.vocab_size as u32);
            tokens.push(tok);
            for _ in 1..width {
                let next = &self.transitions[tok as usize];
                tok = next[rng.random_range(0..next.len())];
                tokens.push(tok);
            }
        }
        Ok(Batch::new(
            Examples::Sequences(tokens),
            size,
            self.spec.context_len as u64,
        ))
    }

    fn loss_and_grad(&self, params: &[f64], batch: &Batch) -> Result<(f64, Vec<f64>)> {
        check_dimension(self.layout.total, params.len())?;
        let Examples::Sequences(tokens) = batch.examples() else {
            return Err(Error::invalid("tiny lm task needs a token batch"));
        };
        let width = self.spec.context_len + 1;
        if tokens.len() != batch.size() * width {
            return Err(Error::invalid("token batch has the wrong sequence length"));
        }
        if tokens.iter().any(|&t| t as usize >= self.spec.vocab_size) {
            return Err(Error::invalid("token id outside the vocabulary"));
        }
        let mut grad = vec![0.0; self.layout.total];
        let mut loss = 0.0;
        for seq in tokens.chunks_exact(width) {
            loss += self.sequence_loss_and_grad(params, seq, &mut grad);
        }
        let n = (batch.size() * self.spec.context_len) as f64;
        for g in &mut grad {
            *g /= n;
        }
        Ok((loss / n, grad))
    }

    fn fingerprint(&self) -> u64 {
        self.fingerprint
    }
}
