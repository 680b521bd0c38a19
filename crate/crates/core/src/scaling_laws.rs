//! The best fixed batch size for a run whose local critical batch size
//! follows a curve `f(t)` over `[0, T]`.
//!
//! Under a squared-error residual `R₂(B) = √∫₀ᵀ (B − f(t))² dt` the minimizer
//! is the time average `B* = (1/T)∫₀ᵀ f(t) dt`. An L2 residual may not be
//! the right way to penalize deviations: training above the critical batch
//! size costs more than training below it. No asymmetric variant is provided.

use serde::{Deserialize, Serialize};

use crate::cbs_meter::CurvePoint;
use crate::error::{Error, Result};

/// Composite trapezoid estimate of `(1/T)∫₀ᵀ f(t) dt` over `n_points` nodes.
pub fn average_cbs_numeric(f: impl Fn(f64) -> f64, horizon: f64, n_points: usize) -> Result<f64> {
    Ok(integrate(f, horizon, n_points)? / horizon)
}

fn integrate(f: impl Fn(f64) -> f64, horizon: f64, n_points: usize) -> Result<f64> {
    if n_points < 2 {
        return Err(Error::invalid("quadrature needs at least 2 points"));
    }
    if !(horizon > 0.0) || !horizon.is_finite() {
        return Err(Error::invalid(format!("horizon {horizon} must be positive")));
    }
    let intervals = (n_points - 1) as f64;
    let h = horizon / intervals;
    let eval = |i: usize| {
        let t = if i == n_points - 1 { horizon } else { i as f64 * h };
        let y = f(t);
        if y.is_finite() {
            Ok(y)
        } else {
            Err(Error::numeric(format!("curve is not finite at t = {t}")))
        }
    };
    let mut sum = 0.5 * (eval(0)? + eval(n_points - 1)?);
    for i in 1..n_points - 1 {
        sum += eval(i)?;
    }
    Ok(sum * h)
}

/// `T^c / (c + 1)`, the average of `t^c`.
pub fn average_cbs_power(c: f64, horizon: f64) -> f64 {
    horizon.powf(c) / (c + 1.0)
}

/// Average of `log(t + 1)`: `((T + 1)/T)·log(T + 1) − 1`, which tends to
/// `log T` for large `T`.
pub fn average_cbs_log(horizon: f64) -> f64 {
    ((horizon + 1.0) / horizon) * horizon.ln_1p() - 1.0
}

/// `R₂(B)` evaluated by quadrature.
pub fn l2_residual(f: impl Fn(f64) -> f64, batch: f64, horizon: f64, n_points: usize) -> Result<f64> {
    Ok(integrate(|t| (batch - f(t)).powi(2), horizon, n_points)?.sqrt())
}

/// Candidate batch size on an evenly spaced grid over `[lo, hi]` with the
/// smallest `R₂`.
pub fn grid_minimizer(
    f: impl Fn(f64) -> f64,
    horizon: f64,
    lo: f64,
    hi: f64,
    cells: usize,
    n_points: usize,
) -> Result<f64> {
    if cells == 0 || !(hi > lo) {
        return Err(Error::invalid("grid needs lo < hi and at least one cell"));
    }
    let step = (hi - lo) / cells as f64;
    let mut best = (f64::INFINITY, lo);
    for i in 0..=cells {
        let b = lo + i as f64 * step;
        let r = l2_residual(&f, b, horizon, n_points)?;
        if r < best.0 {
            best = (r, b);
        }
    }
    Ok(best.1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveFamily {
    Power,
    Log,
}

impl std::str::FromStr for CurveFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "power" => Ok(Self::Power),
            "log" => Ok(Self::Log),
            other => Err(Error::invalid(format!("unknown curve family {other:?}; use power or log"))),
        }
    }
}

/// `scale·t^c` or `scale·log(t + 1)`; both vanish at `t = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CbsCurveModel {
    pub family: CurveFamily,
    /// Exponent for the power family.
    pub c: Option<f64>,
    pub scale: f64,
}

impl CbsCurveModel {
    pub fn power(c: f64, scale: f64) -> Self {
        Self { family: CurveFamily::Power, c: Some(c), scale }
    }

    pub fn log(scale: f64) -> Self {
        Self { family: CurveFamily::Log, c: None, scale }
    }

    pub fn eval(&self, t: f64) -> f64 {
        match self.family {
            CurveFamily::Power => self.scale * t.powf(self.c.unwrap_or(1.0)),
            CurveFamily::Log => self.scale * t.ln_1p(),
        }
    }

    /// Closed-form `B*` over `[0, horizon]`.
    pub fn average(&self, horizon: f64) -> f64 {
        match self.family {
            CurveFamily::Power => self.scale * average_cbs_power(self.c.unwrap_or(1.0), horizon),
            CurveFamily::Log => self.scale * average_cbs_log(horizon),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveFit {
    pub model: CbsCurveModel,
    /// Sum of squared residuals in the original (untransformed) units.
    pub residual_sum: f64,
}

/// Least-squares fit: slope and intercept in log-log space for the power
/// family, a single scale for the log family.
pub fn fit_cbs_curve(points: &[(f64, f64)], family: CurveFamily) -> Result<CurveFit> {
    if points.len() < 3 {
        return Err(Error::invalid(format!("curve fit needs at least 3 points, got {}", points.len())));
    }
    if points.iter().any(|&(t, y)| !(t > 0.0) || !t.is_finite() || !y.is_finite()) {
        return Err(Error::invalid("curve points need positive tokens and finite values"));
    }
    let t0 = points[0].0;
    if points.iter().all(|&(t, _)| t == t0) {
        return Err(Error::SingularFit("all points share the same token position".into()));
    }
    let model = match family {
        CurveFamily::Power => {
            if points.iter().any(|&(_, y)| !(y > 0.0)) {
                return Err(Error::invalid("power-law fit needs positive batch sizes"));
            }
            let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
            let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
            let n = xs.len() as f64;
            let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
            let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
            let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
            let c = sxy / sxx;
            CbsCurveModel::power(c, (my - c * mx).exp())
        }
        CurveFamily::Log => {
            let num: f64 = points.iter().map(|&(t, y)| y * t.ln_1p()).sum();
            let den: f64 = points.iter().map(|&(t, _)| t.ln_1p().powi(2)).sum();
            CbsCurveModel::log(num / den)
        }
    };
    let residual_sum = points.iter().map(|&(t, y)| (y - model.eval(t)).powi(2)).sum();
    Ok(CurveFit { model, residual_sum })
}

/// Which curve value feeds a fit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitTarget {
    #[default]
    Lower,
    Point,
}

/// `(tokens, value)` pairs from a measured curve. Checkpoint 0 and, for
/// point fits, censored rows are skipped.
pub fn fit_points(curve: &[CurvePoint], target: FitTarget) -> Vec<(f64, f64)> {
    curve
        .iter()
        .filter(|p| p.checkpoint_tokens > 0)
        .filter_map(|p| {
            let y = match target {
                FitTarget::Lower => Some(p.interval.lower),
                FitTarget::Point => p.interval.point,
            }?;
            Some((p.checkpoint_tokens as f64, y))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub family: CurveFamily,
    pub target: FitTarget,
    pub c: Option<f64>,
    pub scale: f64,
    pub residual_sum: f64,
    pub n_points: usize,
    pub horizon: f64,
    /// Best fixed batch size over `[0, horizon]` under the fitted curve.
    pub predicted_average_cbs: f64,
    /// Local critical batch size at `horizon`.
    pub predicted_final_cbs: f64,
}

pub fn analyze(curve: &[CurvePoint], family: CurveFamily, target: FitTarget, horizon: f64) -> Result<AnalysisReport> {
    if !(horizon > 0.0) {
        return Err(Error::invalid("analysis horizon must be positive"));
    }
    let points = fit_points(curve, target);
    let fit = fit_cbs_curve(&points, family)?;
    Ok(AnalysisReport {
        family,
        target,
        c: fit.model.c,
        scale: fit.model.scale,
        residual_sum: fit.residual_sum,
        n_points: points.len(),
        horizon,
        predicted_average_cbs: fit.model.average(horizon),
        predicted_final_cbs: fit.model.eval(horizon),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, Normal};

    #[test]
    fn trivial_averages() {
        assert!((average_cbs_numeric(|_| 3.5, 7.0, 11).unwrap() - 3.5).abs() < 1e-12);
        assert!((average_cbs_numeric(|t| t, 10.0, 2).unwrap() - 5.0).abs() < 1e-12);
        assert_eq!(average_cbs_power(1.0, 10.0), 5.0);
        assert_eq!(average_cbs_power(2.0, 3.0), 3.0);
        assert!((average_cbs_power(0.5, 1e4) - 200.0 / 3.0).abs() < 1e-12);
        assert!(average_cbs_numeric(|t| t, 1.0, 1).is_err());
        assert!(matches!(
            average_cbs_numeric(|t| 1.0 / t, 1.0, 10),
            Err(Error::NumericFault(_))
        ));
    }

    #[test]
    fn sqrt_quadrature() {
        let q = average_cbs_numeric(f64::sqrt, 1e4, 1_000_000).unwrap();
        assert!((q / (200.0 / 3.0) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn log_average() {
        let e = std::f64::consts::E;
        // ∫₀^{e−1} log(t+1) dt = 1, so the average is 1/(e−1).
        assert!((average_cbs_log(e - 1.0) - 1.0 / (e - 1.0)).abs() < 1e-12);
        let q = average_cbs_numeric(f64::ln_1p, 1e3, 200_001).unwrap();
        assert!((q / average_cbs_log(1e3) - 1.0).abs() < 1e-9);
        let t = 1e6;
        assert!((average_cbs_log(t) / (t.ln() - 1.0) - 1.0).abs() < 1e-4);
    }

    #[test]
    fn grid_minimizer_hits_the_average() {
        for (f, t) in [
            (Box::new(|t: f64| t.sqrt()) as Box<dyn Fn(f64) -> f64>, 400.0),
            (Box::new(|t: f64| t.ln_1p()), 50.0),
        ] {
            let avg = average_cbs_numeric(&f, t, 20_001).unwrap();
            let cell = avg / 50.0;
            let best = grid_minimizer(&f, t, avg - 10.3 * cell, avg + 9.7 * cell, 20, 4_001).unwrap();
            assert!((best - avg).abs() <= cell, "{best} vs {avg}");
        }
    }

    proptest! {
        #[test]
        fn quadrature_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, t in 1.0f64..1e3) {
            let f = |x: f64| x.sqrt();
            let g = |x: f64| x.ln_1p();
            let lhs = average_cbs_numeric(|x| a * f(x) + b * g(x), t, 1001).unwrap();
            let rhs = a * average_cbs_numeric(f, t, 1001).unwrap() + b * average_cbs_numeric(g, t, 1001).unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()));
        }
    }

    #[test]
    fn exact_fits() {
        let pts: Vec<(f64, f64)> = (1..=10).map(|i| {
            let t = 10f64.powi(i);
            (t, t.sqrt())
        }).collect();
        let fit = fit_cbs_curve(&pts, CurveFamily::Power).unwrap();
        assert!((fit.model.c.unwrap() - 0.5).abs() < 1e-6);
        assert!((fit.model.scale - 1.0).abs() < 1e-6);

        let pts: Vec<(f64, f64)> = (1..=12).map(|i| {
            let t = 3f64.powi(i);
            (t, 7.0 * t.ln_1p())
        }).collect();
        let log = fit_cbs_curve(&pts, CurveFamily::Log).unwrap();
        let power = fit_cbs_curve(&pts, CurveFamily::Power).unwrap();
        assert!((log.model.scale - 7.0).abs() < 1e-9);
        assert!(log.residual_sum < power.residual_sum);
    }

    #[test]
    fn fit_errors() {
        assert!(matches!(
            fit_cbs_curve(&[(1.0, 1.0), (2.0, 2.0)], CurveFamily::Power),
            Err(Error::InvalidArgument(_))
        ));
        assert!(matches!(
            fit_cbs_curve(&[(5.0, 1.0), (5.0, 2.0), (5.0, 3.0)], CurveFamily::Log),
            Err(Error::SingularFit(_))
        ));
        assert!(fit_cbs_curve(&[(0.0, 1.0), (2.0, 2.0), (3.0, 3.0)], CurveFamily::Log).is_err());
    }

    #[test]
    fn noisy_power_recovery() {
        let noise = Normal::new(0.0, 0.05).unwrap();
        let mut within = 0;
        for seed in 0..100 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let c = rng.random_range(0.2..0.8);
            let pts: Vec<(f64, f64)> = (0..20)
                .map(|i| {
                    let t = 10f64.powf(1.0 + 0.25 * i as f64);
                    (t, 3.0 * t.powf(c) * (1.0 + noise.sample(&mut rng)))
                })
                .collect();
            let fit = fit_cbs_curve(&pts, CurveFamily::Power).unwrap();
            if (fit.model.c.unwrap() - c).abs() <= 0.05 {
                within += 1;
            }
        }
        assert!(within >= 95, "{within}/100");
    }

    #[test]
    fn report() {
        use crate::cbs_meter::CbsInterval;
        let curve: Vec<CurvePoint> = [0u64, 100, 400, 900, 1600]
            .iter()
            .map(|&t| {
                let lower = 2.0 * (t as f64).sqrt();
                CurvePoint {
                    checkpoint_tokens: t,
                    k_star: 1.0,
                    interval: CbsInterval { lower, upper: Some(2.0 * lower), point: Some(lower * 2f64.sqrt()) },
                }
            })
            .collect();
        let r = analyze(&curve, CurveFamily::Power, FitTarget::Lower, 2500.0).unwrap();
        assert_eq!(r.n_points, 4);
        assert!((r.c.unwrap() - 0.5).abs() < 1e-9);
        assert!((r.predicted_final_cbs - 100.0).abs() < 1e-6);
        assert!((r.predicted_average_cbs - 200.0 / 3.0).abs() < 1e-6);
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"family\":\"power\""));
    }
}
