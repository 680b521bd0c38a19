//! Two-batch estimator of the simple gradient noise scale
//! `B_simple = tr(Σ) / ‖G‖²`.
//!
//! Each pair holds squared norms of mean gradients over two independent
//! fresh batches of sizes `b_small < b_big`. Since
//! `E‖G_B‖² = ‖G‖² + tr(Σ)/B`, two batch sizes give unbiased per-pair
//! estimates of both terms.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tasks::Task;

pub const DEFAULT_B_SMALL: usize = 1;
pub const DEFAULT_B_BIG: usize = 64;
pub const DEFAULT_N_PAIRS: usize = 4096;
pub const DEFAULT_LEVEL: f64 = 0.95;

/// Below this many pairs the interval approximations are unreliable.
const MIN_PAIRS_FOR_CI: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSamplePair {
    pub g2_small: f64,
    pub g2_big: f64,
    pub b_small: usize,
    pub b_big: usize,
}

impl NoiseSamplePair {
    /// Per-pair estimate of `tr(Σ)`.
    pub fn trace_estimate(&self) -> f64 {
        let (bs, bb) = (self.b_small as f64, self.b_big as f64);
        (self.g2_small - self.g2_big) / (1.0 / bs - 1.0 / bb)
    }

    /// Per-pair estimate of `‖G‖²`.
    pub fn g2_estimate(&self) -> f64 {
        let (bs, bb) = (self.b_small as f64, self.b_big as f64);
        (bb * self.g2_big - bs * self.g2_small) / (bb - bs)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseScaleEstimate {
    pub s_mean: f64,
    pub g2_mean: f64,
    pub b_simple: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_pairs: usize,
    pub b_small: usize,
    pub b_big: usize,
}

fn squared_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Draws `n_pairs` pairs of independent batches at fixed `params`.
/// Pair `i` uses its own child stream of `rng`, so the result does not
/// depend on how the work is scheduled across threads.
pub fn collect_pairs(
    task: &dyn Task,
    params: &[f64],
    b_small: usize,
    b_big: usize,
    n_pairs: usize,
    rng: &RngStream,
) -> Result<Vec<NoiseSamplePair>> {
    if n_pairs < 2 {
        return Err(Error::invalid("noise scale needs at least 2 pairs"));
    }
    if b_small == 0 || b_small >= b_big {
        return Err(Error::invalid(format!(
            "need 0 < b_small < b_big, got {b_small} and {b_big}"
        )));
    }
    (0..n_pairs as u64)
        .into_par_iter()
        .map(|i| {
            let mut stream = rng.child_u64("noise-pair", i);
            let small = task.sample_batch(&mut stream, b_small)?;
            let big = task.sample_batch(&mut stream, b_big)?;
            let (_, g_small) = task.loss_and_grad(params, &small)?;
            let (_, g_big) = task.loss_and_grad(params, &big)?;
            Ok(NoiseSamplePair {
                g2_small: squared_norm(&g_small),
                g2_big: squared_norm(&g_big),
                b_small,
                b_big,
            })
        })
        .collect()
}

fn check_pairs(pairs: &[NoiseSamplePair]) -> Result<(usize, usize)> {
    let Some(first) = pairs.first() else {
        return Err(Error::invalid("no noise pairs"));
    };
    if pairs.len() < 2 {
        return Err(Error::invalid("noise scale needs at least 2 pairs"));
    }
    let (bs, bb) = (first.b_small, first.b_big);
    if bs == 0 || bs >= bb {
        return Err(Error::invalid(format!("need 0 < b_small < b_big, got {bs} and {bb}")));
    }
    if pairs.iter().any(|p| p.b_small != bs || p.b_big != bb) {
        return Err(Error::invalid("noise pairs mix different batch sizes"));
    }
    Ok((bs, bb))
}

fn mean(xs: impl Iterator<Item = f64>) -> (f64, usize) {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (sum / n as f64, n)
}

fn ratio(num: f64, den: f64) -> f64 {
    if num <= 0.0 {
        0.0
    } else if den <= 0.0 {
        f64::INFINITY
    } else {
        num / den
    }
}

/// Point estimate together with the default 95% interval.
pub fn estimate(pairs: &[NoiseSamplePair]) -> Result<NoiseScaleEstimate> {
    let (b_small, b_big) = check_pairs(pairs)?;
    let (s_mean, n) = mean(pairs.iter().map(NoiseSamplePair::trace_estimate));
    let (g2_mean, _) = mean(pairs.iter().map(NoiseSamplePair::g2_estimate));
    let (ci_low, ci_high) = confidence_interval(pairs, DEFAULT_LEVEL)?;
    Ok(NoiseScaleEstimate {
        s_mean,
        g2_mean,
        b_simple: ratio(s_mean, g2_mean),
        ci_low,
        ci_high,
        n_pairs: n,
        b_small,
        b_big,
    })
}

fn z_value(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(format!("confidence level {level} must be in (0, 1)")));
    }
    if level == DEFAULT_LEVEL {
        return Ok(1.96);
    }
    let normal = Normal::standard();
    Ok(normal.inverse_cdf(1.0 - (1.0 - level) / 2.0))
}

/// Interval for `B_simple`, treating per-pair trace estimates as
/// exponential and per-pair `‖G‖²` estimates as normal.
pub fn confidence_interval(pairs: &[NoiseSamplePair], level: f64) -> Result<(f64, f64)> {
    check_pairs(pairs)?;
    let z = z_value(level)?;
    let n = pairs.len();
    if n < MIN_PAIRS_FOR_CI {
        log::warn!("only {n} noise pairs; the interval will be wide and approximate");
    }
    let root_n = (n as f64).sqrt();

    let (s_bar, _) = mean(pairs.iter().map(NoiseSamplePair::trace_estimate));
    let (a_s, b_s) = if s_bar <= 0.0 {
        (0.0, 0.0)
    } else {
        let upper_den = 1.0 - z / root_n;
        let b_s = if upper_den > 0.0 { s_bar / upper_den } else { f64::INFINITY };
        (s_bar / (1.0 + z / root_n), b_s)
    };

    let gs: Vec<f64> = pairs.iter().map(NoiseSamplePair::g2_estimate).collect();
    let (g_bar, _) = mean(gs.iter().copied());
    let var = gs.iter().map(|g| (g - g_bar).powi(2)).sum::<f64>() / (n - 1) as f64;
    let half = z * var.sqrt() / root_n;
    let a_g = (g_bar - half).max(0.0);
    let b_g = (g_bar + half).max(0.0);

    Ok((ratio(a_s, b_g), ratio(b_s, a_g)))
}

#[derive(Debug, Serialize, Deserialize)]
struct NoiseRow {
    checkpoint_tokens: u64,
    n_pairs: usize,
    b_small: usize,
    b_big: usize,
    s_mean: f64,
    g2_mean: f64,
    b_simple: f64,
    ci_low: f64,
    ci_high: f64,
}

/// CSV with one row per checkpoint.
pub fn noise_csv(rows: &[(u64, NoiseScaleEstimate)]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for &(checkpoint_tokens, e) in rows {
        w.serialize(NoiseRow {
            checkpoint_tokens,
            n_pairs: e.n_pairs,
            b_small: e.b_small,
            b_big: e.b_big,
            s_mean: e.s_mean,
            g2_mean: e.g2_mean,
            b_simple: e.b_simple,
            ci_low: e.ci_low,
            ci_high: e.ci_high,
        })?;
    }
    w.into_inner()
        .map_err(|e| Error::io("<csv buffer>", e.into_error()))
}

pub fn read_noise_csv(bytes: &[u8]) -> Result<Vec<(u64, NoiseScaleEstimate)>> {
    let mut r = csv::Reader::from_reader(bytes);
    r.deserialize::<NoiseRow>()
        .map(|row| {
            let r = row?;
            Ok((
                r.checkpoint_tokens,
                NoiseScaleEstimate {
                    s_mean: r.s_mean,
                    g2_mean: r.g2_mean,
                    b_simple: r.b_simple,
                    ci_low: r.ci_low,
                    ci_high: r.ci_high,
                    n_pairs: r.n_pairs,
                    b_small: r.b_small,
                    b_big: r.b_big,
                },
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{analytic_noise_scale, QuadraticTask, QuadraticTaskSpec};

    fn pair(g2_small: f64, g2_big: f64) -> NoiseSamplePair {
        NoiseSamplePair { g2_small, g2_big, b_small: 1, b_big: 64 }
    }

    #[test]
    fn hand_computed_pair() {
        let p = pair(10.0, 1.0);
        assert!((p.trace_estimate() - 9.0 / (1.0 - 1.0 / 64.0)).abs() < 1e-12);
        assert!((p.trace_estimate() - 9.142_857).abs() < 1e-6);
        assert!((p.g2_estimate() - 54.0 / 63.0).abs() < 1e-12);
        assert!((p.g2_estimate() - 0.857_143).abs() < 1e-6);
    }

    #[test]
    fn validation() {
        assert!(estimate(&[pair(1.0, 1.0)]).is_err());
        let mut mixed = vec![pair(1.0, 1.0), pair(2.0, 1.0)];
        mixed[1].b_big = 32;
        assert!(matches!(estimate(&mixed), Err(Error::InvalidArgument(_))));
        assert!(confidence_interval(&[pair(1.0, 1.0); 3], 1.5).is_err());
    }

    #[test]
    fn noiseless_pairs() {
        let spec = QuadraticTaskSpec::isotropic(3, 1.0, 0.0);
        let task = QuadraticTask::new(spec.clone()).unwrap();
        let params = vec![1.0, 2.0, -1.0];
        let g2 = squared_norm(&spec.full_gradient(&params));
        let pairs = collect_pairs(&task, &params, 1, 64, 16, &RngStream::from_seed(0)).unwrap();
        for p in &pairs {
            assert!((p.g2_small - g2).abs() < 1e-12 && (p.g2_big - g2).abs() < 1e-12);
        }
        let e = estimate(&pairs).unwrap();
        assert!(e.s_mean.abs() < 1e-9);
        // Roundoff may leave a tiny positive trace; it must not matter.
        assert!(e.b_simple < 1e-9);
    }

    #[test]
    fn pairs_are_seed_deterministic() {
        let task = QuadraticTask::new(QuadraticTaskSpec::isotropic(2, 1.0, 1.0)).unwrap();
        let p = [1.0, 1.0];
        let a = collect_pairs(&task, &p, 1, 8, 50, &RngStream::from_seed(3)).unwrap();
        let b = collect_pairs(&task, &p, 1, 8, 50, &RngStream::from_seed(3)).unwrap();
        let c = collect_pairs(&task, &p, 1, 8, 50, &RngStream::from_seed(4)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn recovers_the_analytic_ratio() {
        // tr(Σ) = 4 over d = 4, ‖G‖² = 2 with H = I.
        let spec = QuadraticTaskSpec::isotropic(4, 1.0, 1.0);
        let task = QuadraticTask::new(spec.clone()).unwrap();
        let s = 2f64.sqrt() / 2.0;
        let params = vec![s, s, s, s];
        let truth = analytic_noise_scale(&spec, &params).unwrap();
        assert!((truth - 2.0).abs() < 1e-12);
        let pairs = collect_pairs(&task, &params, DEFAULT_B_SMALL, DEFAULT_B_BIG, DEFAULT_N_PAIRS, &RngStream::from_seed(9)).unwrap();
        let e = estimate(&pairs).unwrap();
        assert!((e.b_simple - truth).abs() / truth < 0.05, "{}", e.b_simple);
        assert!((e.s_mean - 4.0).abs() / 4.0 < 0.05);
        assert!((e.g2_mean - 2.0).abs() / 2.0 < 0.05);
        assert!(e.ci_low <= e.b_simple && e.b_simple <= e.ci_high);
    }

    #[test]
    fn permutation_invariant() {
        let pairs: Vec<_> = (0..40).map(|i| pair(1.0 + (i % 7) as f64, 0.5 + (i % 3) as f64 * 0.1)).collect();
        let mut rev = pairs.clone();
        rev.reverse();
        rev.rotate_left(13);
        let (a, b) = (estimate(&pairs).unwrap(), estimate(&rev).unwrap());
        assert!((a.b_simple - b.b_simple).abs() < 1e-12 * a.b_simple);
        assert!((a.ci_low - b.ci_low).abs() < 1e-12 * a.ci_low);
        assert!((a.ci_high - b.ci_high).abs() < 1e-12 * a.ci_high);
    }

    #[test]
    fn trace_scales_with_noise() {
        let params = vec![1.0, -1.0];
        let run = |var: f64| {
            let task = QuadraticTask::new(QuadraticTaskSpec::isotropic(2, 1.0, var)).unwrap();
            estimate(&collect_pairs(&task, &params, 1, 64, 4096, &RngStream::from_seed(1)).unwrap()).unwrap()
        };
        let (one, three) = (run(1.0), run(3.0));
        assert!((three.s_mean / one.s_mean - 3.0).abs() < 0.3);
        assert!((one.g2_mean - 2.0).abs() < 0.15 && (three.g2_mean - 2.0).abs() < 0.4);
    }

    #[test]
    fn interval_edge_cases() {
        // Identical samples: zero variance in both terms.
        let same = vec![pair(10.0, 1.0); 1_000_000];
        let e = estimate(&same).unwrap();
        assert!((e.ci_low / e.b_simple - 1.0).abs() < 0.003);
        assert!((e.ci_high / e.b_simple - 1.0).abs() < 0.003);

        // Mean ‖G‖² indistinguishable from zero.
        let wobble: Vec<_> = (0..100)
            .map(|i| if i % 2 == 0 { pair(10.0, 1.0) } else { pair(100.0, 0.1) })
            .collect();
        let (lo, hi) = confidence_interval(&wobble, 0.95).unwrap();
        assert_eq!(hi, f64::INFINITY);
        assert!(lo >= 0.0);

        // Few pairs still compute.
        let (lo, hi) = confidence_interval(&[pair(10.0, 1.0), pair(9.0, 1.1), pair(11.0, 0.9)], 0.9).unwrap();
        assert!(lo <= hi);
    }

    #[test]
    fn z_values() {
        assert_eq!(z_value(0.95).unwrap(), 1.96);
        assert!((z_value(0.99).unwrap() - 2.575_829).abs() < 1e-5);
    }

    #[test]
    fn csv_round_trip() {
        let e = estimate(&[pair(10.0, 1.0), pair(8.0, 1.2), pair(12.0, 0.9)]).unwrap();
        let bytes = noise_csv(&[(128, e)]).unwrap();
        let text = std::str::from_utf8(&bytes).unwrap();
        assert!(text.starts_with("checkpoint_tokens,n_pairs,b_small,b_big,s_mean,g2_mean,b_simple,ci_low,ci_high\n"));
        assert_eq!(read_noise_csv(&bytes).unwrap(), vec![(128, e)]);
    }
}
