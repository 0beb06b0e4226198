//! Batch losses and their parameter gradients for the flow-based objectives.
//!
//! Per-sample work runs in parallel; results are combined in sample order.
//! Samples whose flow fails numerically are dropped from the batch and
//! counted in the `n_dropped` diagnostic.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::field::{ParamGrad, VelocityField};
use crate::flow::{flow_backward, flow_forward, forward_kl_sample_grad, reverse_kl_sample_grad, SampleGrad, TimeGrid};
use crate::importance::{log_weight_diagnostics, normalize_log_weights};
use crate::par::map_indexed;
use crate::targets::TargetModel;
use crate::vecops::log_sum_exp;

/// Fraction of the batch below which a weight ESS is flagged.
pub const ESS_FLAG_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct BatchGrad {
    pub grad: ParamGrad,
    pub loss_value: f64,
    pub diagnostics: BTreeMap<String, f64>,
}

/// Objective selector shared by config and trainer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    ReverseKl,
    ForwardKl,
    ForwardKlIs,
    Chi2,
    ScoreMatching,
    Interpolant,
}

fn check_batch(batch: &[Vec<f64>], dim: usize) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    for x in batch {
        check_dim(dim, x.len())?;
    }
    Ok(())
}

/// Splits per-sample results into successes (with their indices) and a drop count.
fn collect<T>(results: Vec<Result<T>>) -> Result<(Vec<(usize, T)>, usize)> {
    let total = results.len();
    let mut ok = Vec::with_capacity(total);
    let mut dropped = 0;
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(v) => ok.push((i, v)),
            Err(e) if e.is_numerical() => dropped += 1,
            Err(e) => return Err(e),
        }
    }
    if ok.is_empty() {
        return Err(Error::TooManyFailures { failed: dropped, total });
    }
    Ok((ok, dropped))
}

fn weighted_mean(samples: &[(usize, SampleGrad)], weights: &[f64], n_params: usize) -> (ParamGrad, f64) {
    let mut g = ParamGrad::zeros(n_params);
    let mut loss = 0.0;
    for ((_, s), w) in samples.iter().zip(weights) {
        if *w == 0.0 {
            continue;
        }
        for (a, b) in g.values.iter_mut().zip(&s.grad.values) {
            *a += w * b;
        }
        loss += w * s.loss;
    }
    (g, loss)
}

fn base_diagnostics(samples: &[(usize, SampleGrad)], dropped: usize) -> BTreeMap<String, f64> {
    let n = samples.len() as f64;
    BTreeMap::from([
        ("mean_logjac".to_string(), samples.iter().map(|(_, s)| s.logjac).sum::<f64>() / n),
        ("mean_potential".to_string(), samples.iter().map(|(_, s)| s.potential).sum::<f64>() / n),
        ("n_used".to_string(), n),
        ("n_dropped".to_string(), dropped as f64),
    ])
}

/// Reverse KL from base samples: loss `mean[U*(X_1) - logjac]`.
pub fn reverse_kl_batch(
    f: &VelocityField,
    target: &TargetModel,
    base: &TargetModel,
    batch: &[Vec<f64>],
    grid: &TimeGrid,
) -> Result<BatchGrad> {
    check_dim(target.dim(), base.dim())?;
    check_batch(batch, f.dim())?;
    let results = map_indexed(batch.len(), |i| reverse_kl_sample_grad(f, target, &batch[i], grid));
    let (ok, dropped) = collect(results)?;
    let w = vec![1.0 / ok.len() as f64; ok.len()];
    let (grad, loss_value) = weighted_mean(&ok, &w, f.n_params());
    Ok(BatchGrad { grad, loss_value, diagnostics: base_diagnostics(&ok, dropped) })
}

/// Forward KL from target samples: loss `mean[U_b(Xbar_0) + logjac]`.
pub fn forward_kl_batch(
    f: &VelocityField,
    base: &TargetModel,
    batch: &[Vec<f64>],
    grid: &TimeGrid,
) -> Result<BatchGrad> {
    check_batch(batch, f.dim())?;
    let results = map_indexed(batch.len(), |i| forward_kl_sample_grad(f, base, &batch[i], grid));
    let (ok, dropped) = collect(results)?;
    let w = vec![1.0 / ok.len() as f64; ok.len()];
    let (grad, loss_value) = weighted_mean(&ok, &w, f.n_params());
    Ok(BatchGrad { grad, loss_value, diagnostics: base_diagnostics(&ok, dropped) })
}

/// Pushes base samples through `f_weighting` and returns images with their log transport weights.
pub(crate) fn weighted_images(
    f_weighting: &VelocityField,
    target: &TargetModel,
    base: &TargetModel,
    batch: &[Vec<f64>],
    grid: &TimeGrid,
) -> Vec<Result<(Vec<f64>, f64)>> {
    map_indexed(batch.len(), |i| {
        let x = &batch[i];
        let (x1, lj) = flow_forward(f_weighting, x, grid)?;
        let lw = -target.potential_unchecked(&x1) + base.potential_unchecked(x) + lj;
        if lw.is_nan() {
            return Err(Error::NonFinite("log weight".into()));
        }
        Ok((x1, lw))
    })
}

fn ess_entries(diag: &mut BTreeMap<String, f64>, log_weights: &[f64]) {
    let wd = log_weight_diagnostics(log_weights);
    diag.insert("ess".into(), wd.ess);
    diag.insert("ess_fraction".into(), wd.ess_fraction);
    diag.insert("ess_flag".into(), if wd.ess_fraction < ESS_FLAG_FRACTION { 1.0 } else { 0.0 });
}

/// Importance-weighted forward KL from base samples.
///
/// Base samples are pushed through `f_weighting`; the images act as weighted
/// target data with self-normalized transport weights, and the forward-KL
/// gradient of `f_current` is evaluated at them. When both fields coincide
/// the backward path retraces the forward one.
pub fn forward_kl_is_batch(
    f_current: &VelocityField,
    f_weighting: &VelocityField,
    target: &TargetModel,
    base: &TargetModel,
    batch: &[Vec<f64>],
    grid: &TimeGrid,
) -> Result<BatchGrad> {
    check_dim(target.dim(), base.dim())?;
    check_dim(f_current.dim(), f_weighting.dim())?;
    check_batch(batch, f_current.dim())?;
    let images = weighted_images(f_weighting, target, base, batch, grid);
    let (imgs, dropped_w) = collect(images)?;
    let results = map_indexed(imgs.len(), |j| forward_kl_sample_grad(f_current, base, &imgs[j].1 .0, grid));
    let (ok, dropped_g) = collect(results)?;
    let lw: Vec<f64> = ok.iter().map(|(j, _)| imgs[*j].1 .1).collect();
    let w = normalize_log_weights(&lw)?;
    let (grad, loss_value) = weighted_mean(&ok, &w, f_current.n_params());
    let mut diag = base_diagnostics(&ok, dropped_w + dropped_g);
    ess_entries(&mut diag, &lw);
    Ok(BatchGrad { grad, loss_value, diagnostics: diag })
}

/// Chi-squared objective `mean exp(2A)` with `A = -U*(X_1) + U_b(x) + logjac`.
///
/// `loss_value` is reported in log form, `log mean exp(2A)`; the gradient is
/// that of `mean exp(2A)` itself. Diagnostics include `chi2` (the raw mean)
/// and `jensen_gap = log mean exp(2A) - 2 mean A >= 0`.
pub fn chi2_batch(
    f: &VelocityField,
    target: &TargetModel,
    base: &TargetModel,
    batch: &[Vec<f64>],
    grid: &TimeGrid,
) -> Result<BatchGrad> {
    check_dim(target.dim(), base.dim())?;
    check_batch(batch, f.dim())?;
    let results = map_indexed(batch.len(), |i| {
        let s = reverse_kl_sample_grad(f, target, &batch[i], grid)?;
        let a = -s.loss + base.potential_unchecked(&batch[i]);
        Ok((s, a))
    });
    let (ok, dropped) = collect(results)?;
    let n = ok.len() as f64;
    let two_a: Vec<f64> = ok.iter().map(|(_, (_, a))| 2.0 * a).collect();
    let m = two_a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_loss = log_sum_exp(&two_a) - n.ln();
    let scale = m.exp();
    if !scale.is_finite() || scale == 0.0 {
        return Err(Error::DegenerateWeights(format!("exp(2A) out of range (max 2A = {m})")));
    }
    // d/dtheta mean exp(2A) = mean 2 exp(2A) dA, with dA = -(reverse-KL sample gradient)
    let mut grad = ParamGrad::zeros(f.n_params());
    for ((_, (s, _)), ta) in ok.iter().zip(&two_a) {
        let c = -2.0 * (ta - m).exp() / n;
        for (g, v) in grad.values.iter_mut().zip(&s.grad.values) {
            *g += c * v;
        }
    }
    for g in &mut grad.values {
        *g *= scale;
    }
    if grad.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateWeights("chi-squared gradient overflow".into()));
    }
    let mean_a = two_a.iter().sum::<f64>() / (2.0 * n);
    let samples: Vec<(usize, SampleGrad)> = ok.into_iter().map(|(i, (s, _))| (i, s)).collect();
    let mut diag = base_diagnostics(&samples, dropped);
    diag.insert("chi2".into(), log_loss.exp());
    diag.insert("jensen_gap".into(), log_loss - 2.0 * mean_a);
    let lw: Vec<f64> = two_a.iter().map(|v| 0.5 * v).collect();
    ess_entries(&mut diag, &lw);
    Ok(BatchGrad { grad, loss_value: log_loss, diagnostics: diag })
}

/// `log mean exp(2 [U*(x) - U_b(Xbar_0(x)) - logjac])` over target samples.
pub fn chi2_reverse_diagnostic(
    f: &VelocityField,
    target: &TargetModel,
    base: &TargetModel,
    batch: &[Vec<f64>],
    grid: &TimeGrid,
) -> Result<f64> {
    check_batch(batch, f.dim())?;
    let results = map_indexed(batch.len(), |i| -> Result<f64> {
        let x = &batch[i];
        let (x0, lj) = flow_backward(f, x, grid)?;
        Ok(2.0 * (target.potential(x)? - base.potential_unchecked(&x0) - lj))
    });
    let (ok, _) = collect(results)?;
    let e: Vec<f64> = ok.into_iter().map(|(_, v)| v).collect();
    Ok(log_sum_exp(&e) - (e.len() as f64).ln())
}
