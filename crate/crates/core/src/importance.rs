//! Importance sampling with and without transport.
//!
//! All weight arithmetic happens in log space; normalized weights are formed
//! after subtracting the largest log weight.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::VelocityField;
use crate::flow::{flow_forward, TimeGrid};
use crate::par::map_indexed;
use crate::targets::TargetModel;
use crate::vecops::log_sum_exp;

/// Samples with their transported images and importance weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedBatch {
    pub base_points: Vec<Vec<f64>>,
    pub endpoints: Vec<Vec<f64>>,
    /// Unnormalized log weights.
    pub log_weights: Vec<f64>,
    /// Self-normalized weights, summing to one.
    pub norm_weights: Vec<f64>,
    /// Samples whose flow failed and were excluded.
    pub n_failed: usize,
}

/// Point estimate with a jackknife standard error (`NaN` when undefined).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub std_error: f64,
}

/// Estimate of `Z_target / Z_base`, also carried in log form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZRatio {
    pub value: f64,
    pub log_value: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightDiagnostics {
    pub n: usize,
    pub ess: f64,
    pub ess_fraction: f64,
    /// Empirical `mu_b(w^2) / mu_b(w)^2`, equal to `n / ESS`.
    pub second_moment_ratio: f64,
    pub second_moment_ratio_se: f64,
    pub max_weight_fraction: f64,
}

impl WeightDiagnostics {
    pub fn to_map(&self) -> BTreeMap<String, f64> {
        BTreeMap::from([
            ("n".to_string(), self.n as f64),
            ("ess".to_string(), self.ess),
            ("ess_fraction".to_string(), self.ess_fraction),
            ("second_moment_ratio".to_string(), self.second_moment_ratio),
            ("second_moment_ratio_se".to_string(), self.second_moment_ratio_se),
            ("max_weight_fraction".to_string(), self.max_weight_fraction),
        ])
    }
}

/// Test functions for self-normalized estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Observable {
    /// `f = 1`
    One,
    MeanCoordinate { coord: usize },
    SecondMoment { coord: usize },
    /// `f = 1{x_coord > threshold}`
    IndicatorHalfspace { coord: usize, threshold: f64 },
}

impl Observable {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match *self {
            Observable::One => 1.0,
            Observable::MeanCoordinate { coord } => x[coord],
            Observable::SecondMoment { coord } => x[coord] * x[coord],
            Observable::IndicatorHalfspace { coord, threshold } => {
                if x[coord] > threshold {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn name(&self) -> String {
        match *self {
            Observable::One => "one".into(),
            Observable::MeanCoordinate { coord } => format!("mean_x{coord}"),
            Observable::SecondMoment { coord } => format!("second_moment_x{coord}"),
            Observable::IndicatorHalfspace { coord, threshold } => {
                format!("indicator_x{coord}_gt_{threshold}")
            }
        }
    }

    pub fn check(&self, dim: usize) -> Result<()> {
        let c = match *self {
            Observable::One => return Ok(()),
            Observable::MeanCoordinate { coord }
            | Observable::SecondMoment { coord }
            | Observable::IndicatorHalfspace { coord, .. } => coord,
        };
        if c >= dim {
            return Err(Error::InvalidArgument(format!("observable coordinate {c} out of range for dimension {dim}")));
        }
        Ok(())
    }
}

/// Self-normalized weights from log weights. Errors when no weight is usable.
pub fn normalize_log_weights(log_weights: &[f64]) -> Result<Vec<f64>> {
    if log_weights.is_empty() {
        return Err(Error::DegenerateWeights("empty batch".into()));
    }
    if log_weights.iter().any(|l| l.is_nan() || *l == f64::INFINITY) {
        return Err(Error::DegenerateWeights("log weight is NaN or +inf".into()));
    }
    let lse = log_sum_exp(log_weights);
    if lse == f64::NEG_INFINITY {
        return Err(Error::DegenerateWeights("all weights are zero".into()));
    }
    Ok(log_weights.iter().map(|l| (l - lse).exp()).collect())
}

fn assemble(
    base_points: Vec<Vec<f64>>,
    endpoints: Vec<Vec<f64>>,
    log_weights: Vec<f64>,
    n_failed: usize,
) -> Result<WeightedBatch> {
    let norm_weights = normalize_log_weights(&log_weights)?;
    Ok(WeightedBatch { base_points, endpoints, log_weights, norm_weights, n_failed })
}

fn check_models(target: &TargetModel, base: &TargetModel) -> Result<()> {
    if target.dim() != base.dim() {
        return Err(Error::DimensionMismatch { expected: base.dim(), got: target.dim() });
    }
    Ok(())
}

/// Plain importance weights `log w = -U*(x) + U_b(x)` for base samples.
pub fn vanilla_weights(
    target: &TargetModel,
    base: &TargetModel,
    batch: &[Vec<f64>],
) -> Result<WeightedBatch> {
    check_models(target, base)?;
    let mut lw = Vec::with_capacity(batch.len());
    for x in batch {
        lw.push(-target.potential(x)? + base.potential(x)?);
    }
    assemble(batch.to_vec(), batch.to_vec(), lw, 0)
}

/// Transport weights `log w = -U*(X_1(x)) + U_b(x) + logjac(x)`.
/// Samples whose flow diverges are excluded and counted in `n_failed`.
pub fn transport_weights(
    f: &VelocityField,
    target: &TargetModel,
    base: &TargetModel,
    batch: &[Vec<f64>],
    grid: &TimeGrid,
) -> Result<WeightedBatch> {
    check_models(target, base)?;
    if f.dim() != target.dim() {
        return Err(Error::DimensionMismatch { expected: target.dim(), got: f.dim() });
    }
    let results = map_indexed(batch.len(), |i| -> Result<(Vec<f64>, f64)> {
        let x = &batch[i];
        let ub = base.potential(x)?;
        let (x1, lj) = flow_forward(f, x, grid)?;
        let lw = -target.potential_unchecked(&x1) + ub + lj;
        Ok((x1, lw))
    });
    let mut base_points = Vec::with_capacity(batch.len());
    let mut endpoints = Vec::with_capacity(batch.len());
    let mut lw = Vec::with_capacity(batch.len());
    let mut failed = 0;
    for (x, r) in batch.iter().zip(results) {
        match r {
            Ok((x1, l)) if !l.is_nan() => {
                base_points.push(x.clone());
                endpoints.push(x1);
                lw.push(l);
            }
            Ok(_) => failed += 1,
            Err(e) if e.is_numerical() => failed += 1,
            Err(e) => return Err(e),
        }
    }
    assemble(base_points, endpoints, lw, failed)
}

/// `sum_i f(endpoint_i) * norm_weight_i` with a jackknife standard error.
pub fn self_normalized_estimate(wb: &WeightedBatch, obs: &Observable) -> Estimate {
    let n = wb.norm_weights.len();
    let fv: Vec<f64> = wb.endpoints.iter().map(|x| obs.eval(x)).collect();
    let num: f64 = fv.iter().zip(&wb.norm_weights).map(|(f, w)| f * w).sum();
    let den: f64 = wb.norm_weights.iter().sum();
    let value = num / den;
    if n < 2 {
        return Estimate { value, std_error: f64::NAN };
    }
    let loo: Vec<f64> = (0..n)
        .map(|i| {
            let w = wb.norm_weights[i];
            let d = den - w;
            if d > 0.0 {
                (num - fv[i] * w) / d
            } else {
                f64::NAN
            }
        })
        .collect();
    Estimate { value, std_error: jackknife_se(&loo) }
}

fn jackknife_se(loo: &[f64]) -> f64 {
    let n = loo.len() as f64;
    let m = loo.iter().sum::<f64>() / n;
    ((n - 1.0) / n * loo.iter().map(|v| (v - m) * (v - m)).sum::<f64>()).sqrt()
}

/// Mean of the unnormalized weights, an estimate of `Z_target / Z_base`.
pub fn z_ratio_estimate(wb: &WeightedBatch) -> ZRatio {
    let n = wb.log_weights.len();
    let m = wb.log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_value = log_sum_exp(&wb.log_weights) - (n as f64).ln();
    let value = log_value.exp();
    if n < 2 || m == f64::NEG_INFINITY {
        return ZRatio { value, log_value, std_error: f64::NAN };
    }
    // leave-one-out means in shifted units, then rescaled
    let shifted: Vec<f64> = wb.log_weights.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = shifted.iter().sum();
    let loo: Vec<f64> = shifted.iter().map(|w| (s - w) / (n - 1) as f64).collect();
    ZRatio { value, log_value, std_error: jackknife_se(&loo) * m.exp() }
}

/// ESS, normalized ESS, second-moment ratio (with jackknife SE) and largest weight share.
pub fn weight_diagnostics(wb: &WeightedBatch) -> WeightDiagnostics {
    log_weight_diagnostics(&wb.log_weights)
}

pub fn log_weight_diagnostics(log_weights: &[f64]) -> WeightDiagnostics {
    let n = log_weights.len();
    let m = log_weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if n == 0 || m == f64::NEG_INFINITY || !m.is_finite() {
        return WeightDiagnostics {
            n,
            ess: 0.0,
            ess_fraction: 0.0,
            second_moment_ratio: f64::NAN,
            second_moment_ratio_se: f64::NAN,
            max_weight_fraction: f64::NAN,
        };
    }
    let w: Vec<f64> = log_weights.iter().map(|l| (l - m).exp()).collect();
    let s1: f64 = w.iter().sum();
    let s2: f64 = w.iter().map(|v| v * v).sum();
    let ess = s1 * s1 / s2;
    let ratio = n as f64 * s2 / (s1 * s1);
    let se = if n >= 2 {
        let nm1 = (n - 1) as f64;
        let loo: Vec<f64> = w
            .iter()
            .map(|wi| {
                let a = s1 - wi;
                nm1 * (s2 - wi * wi) / (a * a)
            })
            .collect();
        jackknife_se(&loo)
    } else {
        f64::NAN
    };
    WeightDiagnostics {
        n,
        ess,
        ess_fraction: ess / n as f64,
        second_moment_ratio: ratio,
        second_moment_ratio_se: se,
        max_weight_fraction: 1.0 / s1,
    }
}

/// `(alpha^2 / (2 alpha - 1))^{d/2}` for base `N(0, I)` and target `N(0, I / alpha)`;
/// infinite for `alpha <= 1/2`.
pub fn gaussian_second_moment_ratio(alpha: f64, dim: usize) -> f64 {
    if alpha <= 0.5 {
        return f64::INFINITY;
    }
    (alpha * alpha / (2.0 * alpha - 1.0)).powf(dim as f64 / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use crate::targets::GaussianMixture;

    fn base1() -> TargetModel {
        TargetModel::standard_normal(1).unwrap()
    }

    #[test]
    fn identical_models_give_uniform_weights() {
        let b = base1();
        let xs = b.sample_base(50, &mut stream(1, &[])).unwrap();
        let wb = vanilla_weights(&b, &b, &xs).unwrap();
        assert!(wb.norm_weights.iter().all(|w| (w - 0.02).abs() < 1e-15));
        let d = weight_diagnostics(&wb);
        assert!((d.ess - 50.0).abs() < 1e-9);
        assert!((d.second_moment_ratio - 1.0).abs() < 1e-12);
        let z = z_ratio_estimate(&wb);
        assert_eq!(z.value, 1.0);
        assert_eq!(z.std_error, 0.0);
        let single = vanilla_weights(&b, &b, &xs[..1]).unwrap();
        assert_eq!(single.norm_weights, vec![1.0]);
    }

    #[test]
    fn vanilla_ess_for_gaussian_pair() {
        let n = 100_000;
        let b = base1();
        let t = TargetModel::isotropic_gaussian(1, 2.0).unwrap();
        let xs = b.sample_base(n, &mut stream(2, &[])).unwrap();
        let wb = vanilla_weights(&t, &b, &xs).unwrap();
        // log w = -x^2/2 up to a constant
        let c = wb.log_weights[0] + 0.5 * xs[0][0] * xs[0][0];
        assert!(wb.log_weights.iter().zip(&xs).all(|(l, x)| (l + 0.5 * x[0] * x[0] - c).abs() < 1e-12));
        let ess = weight_diagnostics(&wb).ess;
        let want = n as f64 / (4.0f64 / 3.0).sqrt();
        assert!((ess - want).abs() / want < 0.05);
    }

    #[test]
    fn identity_transport_equals_vanilla() {
        let b = TargetModel::standard_normal(2).unwrap();
        let t = TargetModel::double_well(2, 2.0).unwrap();
        let xs = b.sample_base(64, &mut stream(3, &[])).unwrap();
        let v = vanilla_weights(&t, &b, &xs).unwrap();
        let tw = transport_weights(&VelocityField::zero(2).unwrap(), &t, &b, &xs, &TimeGrid::unit(8).unwrap()).unwrap();
        for (a, c) in v.log_weights.iter().zip(&tw.log_weights) {
            assert_eq!(a.to_bits(), c.to_bits());
        }
    }

    #[test]
    fn exact_map_weights_are_constant() {
        let b = base1();
        let t = TargetModel::isotropic_gaussian(1, 4.0).unwrap();
        let f = VelocityField::scalar_linear(1, -(2f64.ln())).unwrap();
        let xs = b.sample_base(2000, &mut stream(4, &[])).unwrap();
        let wb = transport_weights(&f, &t, &b, &xs, &TimeGrid::unit(64).unwrap()).unwrap();
        let (lo, hi) = wb.log_weights.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, c), &l| (a.min(l), c.max(l)));
        assert!(hi - lo < 1e-6);
        let z = z_ratio_estimate(&wb);
        // Z_target / Z_base = (1/alpha)^{1/2}
        assert!((z.value - 0.5).abs() < 1e-6);
        assert!(z.std_error < 1e-6);
    }

    #[test]
    fn z_ratio_with_offset_and_exact_map() {
        // mixture target with potential offset c: Z = e^{-c}; identity map is exact when target = N(0, 1)
        let c = 1.3;
        let mix = GaussianMixture::isotropic(1, vec![1.0], vec![vec![0.0]], &[1.0]).unwrap();
        let t = TargetModel::gaussian_mixture(mix, c).unwrap();
        let b = base1();
        let xs = b.sample_base(1000, &mut stream(5, &[])).unwrap();
        let wb = transport_weights(&VelocityField::zero(1).unwrap(), &t, &b, &xs, &TimeGrid::unit(4).unwrap()).unwrap();
        let z = z_ratio_estimate(&wb);
        let want = (-c - 0.5 * (2.0 * std::f64::consts::PI).ln()).exp();
        assert!((z.value - want).abs() <= 3.0 * z.std_error.max(1e-12 * want));
    }

    #[test]
    fn self_normalized_properties() {
        let b = base1();
        let t = TargetModel::double_well(1, 2.0).unwrap();
        let xs = b.sample_base(500, &mut stream(6, &[])).unwrap();
        let wb = vanilla_weights(&t, &b, &xs).unwrap();
        assert!((self_normalized_estimate(&wb, &Observable::One).value - 1.0).abs() < 1e-12);
        let u = vanilla_weights(&b, &b, &xs).unwrap();
        let e = self_normalized_estimate(&u, &Observable::MeanCoordinate { coord: 0 });
        let plain = xs.iter().map(|x| x[0]).sum::<f64>() / xs.len() as f64;
        assert!((e.value - plain).abs() < 1e-12);
        // plain sample mean has jackknife SE = sample std / sqrt(n)
        let var = xs.iter().map(|x| (x[0] - plain).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
        assert!((e.std_error - (var / xs.len() as f64).sqrt()).abs() < 1e-6);
    }

    #[test]
    fn symmetric_target_mean_with_exact_map() {
        let n = 100_000;
        let b = base1();
        let t = TargetModel::isotropic_gaussian(1, 4.0).unwrap();
        let f = VelocityField::scalar_linear(1, -(2f64.ln())).unwrap();
        let xs = b.sample_base(n, &mut stream(7, &[])).unwrap();
        let wb = transport_weights(&f, &t, &b, &xs, &TimeGrid::unit(16).unwrap()).unwrap();
        let e = self_normalized_estimate(&wb, &Observable::MeanCoordinate { coord: 0 });
        assert!(e.value.abs() < 4.0 * 0.5 / (n as f64).sqrt());
    }

    #[test]
    fn diagnostics_edge_cases_and_shift_invariance() {
        let d = log_weight_diagnostics(&[0.0, f64::NEG_INFINITY, f64::NEG_INFINITY]);
        assert!((d.ess - 1.0).abs() < 1e-15);
        assert_eq!(d.max_weight_fraction, 1.0);
        let lw = [0.1, -2.0, 0.7, 1.5, -0.3];
        let a = log_weight_diagnostics(&lw);
        let shifted: Vec<f64> = lw.iter().map(|l| l + 700.0).collect();
        let b = log_weight_diagnostics(&shifted);
        assert!((a.ess - b.ess).abs() < 1e-12);
        assert!((a.second_moment_ratio - b.second_moment_ratio).abs() < 1e-12);
        assert!(normalize_log_weights(&[f64::NEG_INFINITY; 3]).is_err());
        assert!(normalize_log_weights(&[f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn gaussian_ratio_closed_form() {
        assert!((gaussian_second_moment_ratio(2.0, 2) - 4.0 / 3.0).abs() < 1e-15);
        assert_eq!(gaussian_second_moment_ratio(1.0, 4), 1.0);
        assert!(gaussian_second_moment_ratio(0.5, 1).is_infinite());
    }

    #[test]
    fn observables() {
        assert_eq!(Observable::SecondMoment { coord: 1 }.eval(&[1.0, 3.0]), 9.0);
        assert_eq!(Observable::IndicatorHalfspace { coord: 0, threshold: 0.5 }.eval(&[0.6]), 1.0);
        assert_eq!(Observable::IndicatorHalfspace { coord: 0, threshold: 0.5 }.eval(&[0.4]), 0.0);
        assert!(Observable::MeanCoordinate { coord: 2 }.check(2).is_err());
    }
}
