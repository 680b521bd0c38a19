use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{check_batch_size, check_dimension, fingerprint_of, Batch, Examples, Task};
use crate::error::{Error, Result};
use crate::rng::RngStream;

/// Noisy quadratic bowl with diagonal curvature and diagonal per-example
/// gradient covariance.
///
/// The per-example loss at θ is `½ dᵀHd + ξᵀd` with `d = θ − θ*` and
/// `ξ ~ N(0, diag(noise_cov_diag))`, so the per-example gradient is
/// `Hd + ξ` and the full gradient and covariance are known exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticTaskSpec {
    pub dimension: usize,
    pub hessian_diag: Vec<f64>,
    pub optimum: Vec<f64>,
    pub noise_cov_diag: Vec<f64>,
    #[serde(default = "one")]
    pub tokens_per_example: u64,
    /// Starting point; defaults to `optimum + 1` in every coordinate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<Vec<f64>>,
}

fn one() -> u64 {
    1
}

impl QuadraticTaskSpec {
    /// `H = h·I`, `Σ = σ²·I`, optimum at the origin.
    pub fn isotropic(dimension: usize, curvature: f64, noise_var: f64) -> Self {
        Self {
            dimension,
            hessian_diag: vec![curvature; dimension],
            optimum: vec![0.0; dimension],
            noise_cov_diag: vec![noise_var; dimension],
            tokens_per_example: 1,
            init: None,
        }
    }

    pub fn with_init(mut self, init: Vec<f64>) -> Self {
        self.init = Some(init);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dimension;
        if d == 0 {
            return Err(Error::invalid("quadratic dimension must be positive"));
        }
        for (name, len) in [
            ("hessian_diag", self.hessian_diag.len()),
            ("optimum", self.optimum.len()),
            ("noise_cov_diag", self.noise_cov_diag.len()),
        ] {
            if len != d {
                return Err(Error::invalid(format!("{name} has {len} entries, expected {d}")));
            }
        }
        if let Some(init) = &self.init {
            check_dimension(d, init.len())?;
        }
        if self.hessian_diag.iter().any(|&h| !(h > 0.0 && h.is_finite())) {
            return Err(Error::invalid("hessian_diag entries must be positive"));
        }
        if self.noise_cov_diag.iter().any(|&s| !(s >= 0.0 && s.is_finite())) {
            return Err(Error::invalid("noise_cov_diag entries must be nonnegative"));
        }
        if self.tokens_per_example == 0 {
            return Err(Error::invalid("tokens_per_example must be positive"));
        }
        Ok(())
    }

    /// `H(θ − θ*)`.
    pub fn full_gradient(&self, params: &[f64]) -> Vec<f64> {
        params
            .iter()
            .zip(&self.optimum)
            .zip(&self.hessian_diag)
            .map(|((p, o), h)| h * (p - o))
            .collect()
    }

    pub fn trace_sigma(&self) -> f64 {
        self.noise_cov_diag.iter().sum()
    }

    /// Noiseless loss `½ dᵀHd`.
    pub fn expected_loss(&self, params: &[f64]) -> f64 {
        params
            .iter()
            .zip(&self.optimum)
            .zip(&self.hessian_diag)
            .map(|((p, o), h)| 0.5 * h * (p - o) * (p - o))
            .sum()
    }
}

/// `tr(Σ)/‖H(θ−θ*)‖²` evaluated exactly.
pub fn analytic_noise_scale(spec: &QuadraticTaskSpec, params: &[f64]) -> Result<f64> {
    spec.validate()?;
    check_dimension(spec.dimension, params.len())?;
    let g2: f64 = spec.full_gradient(params).iter().map(|g| g * g).sum();
    if g2 == 0.0 {
        return Err(Error::InfiniteNoiseScale);
    }
    Ok(spec.trace_sigma() / g2)
}

#[derive(Clone, Debug)]
pub struct QuadraticTask {
    spec: QuadraticTaskSpec,
    noise_sd: Vec<f64>,
    fingerprint: u64,
}

impl QuadraticTask {
    pub fn new(spec: QuadraticTaskSpec) -> Result<Self> {
        spec.validate()?;
        let noise_sd = spec.noise_cov_diag.iter().map(|s| s.sqrt()).collect();
        let fingerprint = fingerprint_of(&("quadratic", &spec));
        Ok(Self {
            spec,
            noise_sd,
            fingerprint,
        })
    }

    pub fn spec(&self) -> &QuadraticTaskSpec {
        &self.spec
    }
}

impl Task for QuadraticTask {
    fn dimension(&self) -> usize {
        self.spec.dimension
    }

    fn tokens_per_example(&self) -> u64 {
        self.spec.tokens_per_example
    }

    fn init_params(&self, _rng: &mut RngStream) -> Vec<f64> {
        match &self.spec.init {
            Some(init) => init.clone(),
            None => self.spec.optimum.iter().map(|o| o + 1.0).collect(),
        }
    }

    fn sample_batch(&self, rng: &mut RngStream, size: usize) -> Result<Batch> {
        check_batch_size(size)?;
        let mut noise = Vec::with_capacity(size * self.spec.dimension);
        for _ in 0..size {
            for &sd in &self.noise_sd {
                let z: f64 = StandardNormal.sample(rng);
                noise.push(sd * z);
            }
        }
        Ok(Batch::new(
            Examples::Noise(noise),
            size,
            self.spec.tokens_per_example,
        ))
    }

    fn loss_and_grad(&self, params: &[f64], batch: &Batch) -> Result<(f64, Vec<f64>)> {
        let d = self.spec.dimension;
        check_dimension(d, params.len())?;
        let Examples::Noise(noise) = batch.examples() else {
            return Err(Error::invalid("quadratic task needs a noise batch"));
        };
        if noise.len() != batch.size() * d {
            return Err(Error::invalid("noise batch has the wrong row width"));
        }
        let offset: Vec<f64> = params
            .iter()
            .zip(&self.spec.optimum)
            .map(|(p, o)| p - o)
            .collect();
        let mut mean_noise = vec![0.0; d];
        for row in noise.chunks_exact(d) {
            for (m, x) in mean_noise.iter_mut().zip(row) {
                *m += x;
            }
        }
        let n = batch.size() as f64;
        for m in &mut mean_noise {
            *m /= n;
        }
        let mut loss = 0.0;
        let mut grad = Vec::with_capacity(d);
        for j in 0..d {
            let h = self.spec.hessian_diag[j];
            loss += 0.5 * h * offset[j] * offset[j] + mean_noise[j] * offset[j];
            grad.push(h * offset[j] + mean_noise[j]);
        }
        Ok((loss, grad))
    }

    fn fingerprint(&self) -> u64 {
        self.fingerprint
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_dim(h: f64, sigma2: f64) -> QuadraticTask {
        QuadraticTask::new(QuadraticTaskSpec {
            dimension: 1,
            hessian_diag: vec![h],
            optimum: vec![0.0],
            noise_cov_diag: vec![sigma2],
            tokens_per_example: 1,
            init: None,
        })
        .unwrap()
    }

    #[test]
    fn batch_token_count_and_determinism() {
        let task = QuadraticTask::new(QuadraticTaskSpec::isotropic(3, 1.0, 0.5)).unwrap();
        let a = task.sample_batch(&mut RngStream::from_seed(7), 4).unwrap();
        let b = task.sample_batch(&mut RngStream::from_seed(7), 4).unwrap();
        assert_eq!(a.size(), 4);
        assert_eq!(a.token_count(), 4);
        assert_eq!(a, b);
        assert!(task.sample_batch(&mut RngStream::from_seed(7), 0).is_err());
    }

    #[test]
    fn optimum_has_zero_loss_and_gradient() {
        let task = one_dim(3.0, 0.0);
        let batch = task.sample_batch(&mut RngStream::from_seed(1), 5).unwrap();
        let (loss, grad) = task.loss_and_grad(&[0.0], &batch).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(grad, vec![0.0]);
    }

    #[test]
    fn unit_offset_with_curvature_two() {
        let task = one_dim(2.0, 0.0);
        let batch = task.sample_batch(&mut RngStream::from_seed(1), 3).unwrap();
        let (loss, grad) = task.loss_and_grad(&[1.0], &batch).unwrap();
        assert_eq!(grad, vec![2.0]);
        assert_eq!(loss, 1.0);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let task = one_dim(1.0, 1.0);
        let batch = task.sample_batch(&mut RngStream::from_seed(1), 2).unwrap();
        assert!(matches!(
            task.loss_and_grad(&[1.0, 2.0], &batch),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn analytic_noise_scale_cases() {
        // tr(Σ) = 4, ‖G‖² = 2
        let spec = QuadraticTaskSpec::isotropic(2, 1.0, 2.0);
        assert_eq!(analytic_noise_scale(&spec, &[1.0, 1.0]).unwrap(), 2.0);

        let spec = QuadraticTaskSpec::isotropic(2, 1.0, 0.0);
        assert_eq!(analytic_noise_scale(&spec, &[1.0, 1.0]).unwrap(), 0.0);

        let spec = QuadraticTaskSpec {
            dimension: 2,
            hessian_diag: vec![1.0, 1.0],
            optimum: vec![0.0, 0.0],
            noise_cov_diag: vec![5.0, 20.0],
            tokens_per_example: 1,
            init: None,
        };
        assert_eq!(analytic_noise_scale(&spec, &[3.0, 4.0]).unwrap(), 1.0);

        assert!(matches!(
            analytic_noise_scale(&spec, &[0.0, 0.0]),
            Err(Error::InfiniteNoiseScale)
        ));
    }

    #[test]
    fn empirical_covariance_matches_spec() {
        let spec = QuadraticTaskSpec {
            dimension: 3,
            hessian_diag: vec![1.0, 2.0, 0.5],
            optimum: vec![0.5, -1.0, 2.0],
            noise_cov_diag: vec![0.25, 1.0, 4.0],
            tokens_per_example: 1,
            init: None,
        };
        let task = QuadraticTask::new(spec.clone()).unwrap();
        let params = vec![1.0, 0.0, 1.0];
        let g = spec.full_gradient(&params);
        let n = 100_000;
        let mut rng = RngStream::from_seed(11);
        let mut sum_sq = [0.0; 3];
        for _ in 0..n {
            let example = task.sample_batch(&mut rng, 1).unwrap();
            let (_, grad) = task.loss_and_grad(&params, &example).unwrap();
            for j in 0..3 {
                sum_sq[j] += (grad[j] - g[j]).powi(2);
            }
        }
        for j in 0..3 {
            let v = sum_sq[j] / n as f64;
            let want = spec.noise_cov_diag[j];
            assert!((v - want).abs() / want < 0.03, "coordinate {j}: {v} vs {want}");
        }
    }

    #[test]
    fn batch_mean_is_linear_in_examples() {
        let task = QuadraticTask::new(QuadraticTaskSpec::isotropic(4, 1.5, 2.0)).unwrap();
        let params = vec![0.3, -0.2, 1.0, 0.0];
        let batch = task.sample_batch(&mut RngStream::from_seed(5), 10).unwrap();
        let (head, tail) = batch.split_at(4).unwrap();
        let (l, g) = task.loss_and_grad(&params, &batch).unwrap();
        let (lh, gh) = task.loss_and_grad(&params, &head).unwrap();
        let (lt, gt) = task.loss_and_grad(&params, &tail).unwrap();
        assert!((l - (4.0 * lh + 6.0 * lt) / 10.0).abs() < 1e-12);
        for j in 0..4 {
            assert!((g[j] - (4.0 * gh[j] + 6.0 * gt[j]) / 10.0).abs() < 1e-12);
        }
    }
}
