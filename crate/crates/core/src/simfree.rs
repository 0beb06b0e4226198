//! Simulation-free training targets: OU score matching and stochastic
//! interpolants, their importance-weighted variants, and samplers driven by
//! a score field (reverse-time SDE and probability flow).

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, Error, Result};
use crate::field::{ParamGrad, VelocityField};
use crate::flow::{flow_map, TimeGrid};
use crate::importance::{log_weight_diagnostics, normalize_log_weights};
use crate::objectives::{weighted_images, BatchGrad, ESS_FLAG_FRACTION};
use crate::par::map_indexed;
use crate::rng::{standard_normal_vec, stream, Stream};
use crate::targets::TargetModel;

/// `x_t = alpha(t) x_b + beta(t) x_*`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterpolantSchedule {
    /// `alpha = 1 - t`, `beta = t`
    #[default]
    Linear,
    /// `alpha = cos(pi t / 2)`, `beta = sin(pi t / 2)`
    Trigonometric,
}

impl InterpolantSchedule {
    pub fn alpha(&self, t: f64) -> f64 {
        match self {
            Self::Linear => 1.0 - t,
            Self::Trigonometric => (0.5 * std::f64::consts::PI * t).cos(),
        }
    }

    pub fn beta(&self, t: f64) -> f64 {
        match self {
            Self::Linear => t,
            Self::Trigonometric => (0.5 * std::f64::consts::PI * t).sin(),
        }
    }

    pub fn alpha_dot(&self, t: f64) -> f64 {
        match self {
            Self::Linear => -1.0,
            Self::Trigonometric => -0.5 * std::f64::consts::PI * (0.5 * std::f64::consts::PI * t).sin(),
        }
    }

    pub fn beta_dot(&self, t: f64) -> f64 {
        match self {
            Self::Linear => 1.0,
            Self::Trigonometric => 0.5 * std::f64::consts::PI * (0.5 * std::f64::consts::PI * t).cos(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeDist {
    #[default]
    Uniform,
    /// Unit-rate exponential truncated to `[t_min, T]`.
    Exponential,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub horizon: f64,
    pub t_min: f64,
    pub time_dist: TimeDist,
    pub n_sde_steps: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self { horizon: 4.0, t_min: 1e-3, time_dist: TimeDist::Uniform, n_sde_steps: 400 }
    }
}

impl DiffusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_min > 0.0 && self.t_min < self.horizon && self.horizon.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "diffusion times need 0 < t_min < T (got t_min = {}, T = {})",
                self.t_min, self.horizon
            )));
        }
        if self.n_sde_steps == 0 {
            return Err(Error::InvalidArgument("n_sde_steps must be >= 1".into()));
        }
        Ok(())
    }

    pub fn sample_time<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        match self.time_dist {
            TimeDist::Uniform => self.t_min + u * (self.horizon - self.t_min),
            TimeDist::Exponential => {
                // inverse CDF of exp(-t) restricted to [t_min, T]
                let a = (-self.t_min).exp();
                let b = (-self.horizon).exp();
                -(a - u * (a - b)).ln()
            }
        }
    }

    /// Grid for the probability flow of a score field, from `T` (base) down to `t_min` (target).
    pub fn flow_grid(&self, n_steps: usize) -> Result<TimeGrid> {
        TimeGrid::new(n_steps, self.horizon, self.t_min)
    }
}

/// `x* e^{-t} + sqrt(1 - e^{-2t}) xi`
pub fn ou_forward_sample(xstar: &[f64], t: f64, xi: &[f64]) -> Vec<f64> {
    let a = (-t).exp();
    let b = (-(-2.0 * t).exp_m1()).sqrt();
    xstar.iter().zip(xi).map(|(x, z)| a * x + b * z).collect()
}

/// The probability-flow velocity `-x - s(t, x)` of a score field.
pub fn score_to_velocity(s: VelocityField) -> VelocityField {
    VelocityField::score_to_velocity(s)
}

fn finish(
    per: Vec<Result<(f64, ParamGrad)>>,
    weights: Option<Vec<f64>>,
    n_params: usize,
    extra: BTreeMap<String, f64>,
) -> Result<BatchGrad> {
    let n = per.len();
    let mut grad = ParamGrad::zeros(n_params);
    let mut loss = 0.0;
    for (i, r) in per.into_iter().enumerate() {
        let (l, g) = r?;
        let w = weights.as_ref().map_or(1.0 / n as f64, |w| w[i]);
        if w == 0.0 {
            continue;
        }
        loss += w * l;
        for (a, b) in grad.values.iter_mut().zip(&g.values) {
            *a += w * b;
        }
    }
    Ok(BatchGrad { grad, loss_value: loss, diagnostics: extra })
}

/// Weighted Hyvarinen loss `sum_i w_i [|s(t_i, y_i)|^2 + 2 div s(t_i, y_i)]` at given points;
/// uniform `1/n` weights when `weights` is `None`.
pub fn score_loss_at(
    s: &VelocityField,
    points: &[Vec<f64>],
    times: &[f64],
    weights: Option<Vec<f64>>,
) -> Result<BatchGrad> {
    if points.is_empty() || points.len() != times.len() {
        return Err(Error::InvalidArgument("score loss needs matching, non-empty points and times".into()));
    }
    let per = map_indexed(points.len(), |i| -> Result<(f64, ParamGrad)> {
        let y = &points[i];
        let t = times[i];
        let (v, div) = s.velocity_and_divergence(t, y)?;
        let l = v.iter().map(|a| a * a).sum::<f64>() + 2.0 * div;
        let vbar: Vec<f64> = v.iter().map(|a| 2.0 * a).collect();
        let mut g = ParamGrad::zeros(s.n_params());
        s.vjp(t, y, &vbar, 2.0, Some(&mut g.values));
        Ok((l, g))
    });
    finish(per, weights, s.n_params(), BTreeMap::new())
}

/// Noised points `y_i` and times `t_i` for a batch, one stream per sample.
fn noise_batch(batch: &[Vec<f64>], cfg: &DiffusionConfig, key: u64) -> (Vec<Vec<f64>>, Vec<f64>) {
    let drawn = map_indexed(batch.len(), |i| {
        let mut r = stream(key, &[i as u64]);
        let t = cfg.sample_time(&mut r);
        let xi = standard_normal_vec(&mut r, batch[i].len());
        (ou_forward_sample(&batch[i], t, &xi), t)
    });
    drawn.into_iter().unzip()
}

/// Score matching on target samples: `t_i ~ time_dist`, `y_i = ou_forward_sample(x*_i, t_i, xi_i)`.
pub fn score_matching_batch(
    s: &VelocityField,
    batch: &[Vec<f64>],
    cfg: &DiffusionConfig,
    rng: &mut Stream,
) -> Result<BatchGrad> {
    cfg.validate()?;
    check_points(batch, s.dim())?;
    let key: u64 = rng.random();
    let (ys, ts) = noise_batch(batch, cfg, key);
    score_loss_at(s, &ys, &ts, None)
}

fn check_points(batch: &[Vec<f64>], dim: usize) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    for x in batch {
        check_dim(dim, x.len())?;
        check_finite("batch sample", x)?;
    }
    Ok(())
}

/// Images of base samples under `f_transport` with their normalized weights;
/// failed samples get zero weight.
fn transported(
    f_transport: &VelocityField,
    target: &TargetModel,
    base: &TargetModel,
    batch: &[Vec<f64>],
    grid: &TimeGrid,
) -> Result<(Vec<Vec<f64>>, Vec<f64>, BTreeMap<String, f64>)> {
    let imgs = weighted_images(f_transport, target, base, batch, grid);
    let mut points = Vec::with_capacity(batch.len());
    let mut lw = Vec::with_capacity(batch.len());
    let mut dropped = 0usize;
    for (x, r) in batch.iter().zip(imgs) {
        match r {
            Ok((x1, l)) => {
                points.push(x1);
                lw.push(l);
            }
            Err(e) if e.is_numerical() => {
                dropped += 1;
                points.push(x.clone());
                lw.push(f64::NEG_INFINITY);
            }
            Err(e) => return Err(e),
        }
    }
    let w = normalize_log_weights(&lw)?;
    let wd = log_weight_diagnostics(&lw);
    let diag = BTreeMap::from([
        ("ess".to_string(), wd.ess),
        ("ess_fraction".to_string(), wd.ess_fraction),
        ("ess_flag".to_string(), if wd.ess_fraction < ESS_FLAG_FRACTION { 1.0 } else { 0.0 }),
        ("n_dropped".to_string(), dropped as f64),
    ]);
    Ok((points, w, diag))
}

/// Importance-weighted score matching from base samples pushed through `f_transport`.
#[allow(clippy::too_many_arguments)]
pub fn score_matching_is_batch(
    s: &VelocityField,
    f_transport: &VelocityField,
    target: &TargetModel,
    base: &TargetModel,
    batch: &[Vec<f64>],
    grid: &TimeGrid,
    cfg: &DiffusionConfig,
    rng: &mut Stream,
) -> Result<BatchGrad> {
    cfg.validate()?;
    check_points(batch, s.dim())?;
    let (points, w, diag) = transported(f_transport, target, base, batch, grid)?;
    let key: u64 = rng.random();
    let (ys, ts) = noise_batch(&points, cfg, key);
    let mut out = score_loss_at(s, &ys, &ts, Some(w))?;
    out.diagnostics = diag;
    Ok(out)
}

/// Euler-Maruyama for `dY = [Y + 2 s(T - tau, Y)] dtau + sqrt(2) dW` on
/// `[0, T - t_min]`, started from `N(0, I)`.
pub fn reverse_sde_sample(
    s: &VelocityField,
    cfg: &DiffusionConfig,
    n: usize,
    rng: &mut Stream,
) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let d = s.dim();
    let key: u64 = rng.random();
    let steps = cfg.n_sde_steps;
    let dt = (cfg.horizon - cfg.t_min) / steps as f64;
    let sq = (2.0 * dt).sqrt();
    let out = map_indexed(n, |i| -> Result<Vec<f64>> {
        let mut r = stream(key, &[i as u64]);
        let mut y = standard_normal_vec(&mut r, d);
        for k in 0..steps {
            let t = cfg.horizon - k as f64 * dt;
            let sc = s.velocity_unchecked(t, &y);
            for j in 0..d {
                let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut r);
                y[j] += (y[j] + 2.0 * sc[j]) * dt + sq * z;
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("reverse SDE state at step {k}")));
            }
        }
        Ok(y)
    });
    out.into_iter().collect()
}

/// Probability-flow sampling: `N(0, I)` draws at `T` integrated down to `t_min`
/// with the velocity `-x - s(t, x)`.
pub fn probability_flow_sample(
    s: &VelocityField,
    cfg: &DiffusionConfig,
    n: usize,
    n_steps: usize,
    rng: &mut Stream,
) -> Result<Vec<Vec<f64>>> {
    cfg.validate()?;
    let v = VelocityField::score_to_velocity(s.clone());
    let grid = cfg.flow_grid(n_steps)?;
    let key: u64 = rng.random();
    let out = map_indexed(n, |i| {
        let mut r = stream(key, &[i as u64]);
        let x = standard_normal_vec(&mut r, s.dim());
        flow_map(&v, &x, &grid)
    });
    out.into_iter().collect()
}

/// Interpolant point and its time derivative.
pub fn interpolant_point(
    xb: &[f64],
    xstar: &[f64],
    t: f64,
    sched: &InterpolantSchedule,
) -> (Vec<f64>, Vec<f64>) {
    let (a, b, ad, bd) = (sched.alpha(t), sched.beta(t), sched.alpha_dot(t), sched.beta_dot(t));
    let xt = xb.iter().zip(xstar).map(|(p, q)| a * p + b * q).collect();
    let xd = xb.iter().zip(xstar).map(|(p, q)| ad * p + bd * q).collect();
    (xt, xd)
}

/// Weighted interpolant regression loss `sum_i w_i [|v(t_i, x_t)|^2 - 2 xdot . v(t_i, x_t)]`.
pub fn interpolant_loss_at(
    f: &VelocityField,
    pairs: &[(Vec<f64>, Vec<f64>)],
    times: &[f64],
    sched: &InterpolantSchedule,
    weights: Option<Vec<f64>>,
) -> Result<BatchGrad> {
    if pairs.is_empty() || pairs.len() != times.len() {
        return Err(Error::InvalidArgument("interpolant loss needs matching, non-empty pairs and times".into()));
    }
    let per = map_indexed(pairs.len(), |i| -> Result<(f64, ParamGrad)> {
        let (xb, xs) = &pairs[i];
        let t = times[i];
        let (xt, xd) = interpolant_point(xb, xs, t, sched);
        let v = f.velocity(t, &xt)?;
        let l: f64 = v.iter().zip(&xd).map(|(a, b)| a * a - 2.0 * a * b).sum();
        let vbar: Vec<f64> = v.iter().zip(&xd).map(|(a, b)| 2.0 * (a - b)).collect();
        let mut g = ParamGrad::zeros(f.n_params());
        f.vjp(t, &xt, &vbar, 0.0, Some(&mut g.values));
        Ok((l, g))
    });
    finish(per, weights, f.n_params(), BTreeMap::new())
}

/// Interpolant regression on `(x_b, x_*)` pairs with `t_i ~ U[0, 1]`.
pub fn interpolant_batch(
    f: &VelocityField,
    pairs: &[(Vec<f64>, Vec<f64>)],
    sched: &InterpolantSchedule,
    rng: &mut Stream,
) -> Result<BatchGrad> {
    for (a, b) in pairs {
        check_dim(f.dim(), a.len())?;
        check_dim(f.dim(), b.len())?;
    }
    let times: Vec<f64> = (0..pairs.len()).map(|_| rng.random::<f64>()).collect();
    interpolant_loss_at(f, pairs, &times, sched, None)
}

/// Weighted interpolant regression on pairs `(x_b, X_1(x_b))` from `f_transport`.
#[allow(clippy::too_many_arguments)]
pub fn interpolant_is_batch(
    f_current: &VelocityField,
    f_transport: &VelocityField,
    target: &TargetModel,
    base: &TargetModel,
    batch: &[Vec<f64>],
    grid: &TimeGrid,
    sched: &InterpolantSchedule,
    rng: &mut Stream,
) -> Result<BatchGrad> {
    check_points(batch, f_current.dim())?;
    let (points, w, diag) = transported(f_transport, target, base, batch, grid)?;
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = batch.iter().cloned().zip(points).collect();
    let times: Vec<f64> = (0..pairs.len()).map(|_| rng.random::<f64>()).collect();
    let mut out = interpolant_loss_at(f_current, &pairs, &times, sched, Some(w))?;
    out.diagnostics = diag;
    Ok(out)
}

/// Conditional-expectation velocity for independent zero-mean Gaussians with
/// per-coordinate variances `sigma_b^2` (base) and `sigma_star^2` (target).
pub fn gaussian_interpolant_velocity_oracle(
    sigma_b: f64,
    sigma_star: f64,
    sched: &InterpolantSchedule,
    t: f64,
    x: &[f64],
) -> Vec<f64> {
    let (a, b) = (sched.alpha(t), sched.beta(t));
    let (sb2, ss2) = (sigma_b * sigma_b, sigma_star * sigma_star);
    let c = (sched.alpha_dot(t) * a * sb2 + sched.beta_dot(t) * b * ss2) / (a * a * sb2 + b * b * ss2);
    x.iter().map(|v| c * v).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::targets::GaussianMixture;

    fn moments(xs: &[Vec<f64>]) -> (f64, f64) {
        let n = xs.len() as f64;
        let m = xs.iter().map(|x| x[0]).sum::<f64>() / n;
        let v = xs.iter().map(|x| (x[0] - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, v)
    }

    #[test]
    fn ou_forward_limits_and_moments() {
        assert_eq!(ou_forward_sample(&[1.5, -2.0], 0.0, &[0.3, 0.4]), vec![1.5, -2.0]);
        let late = ou_forward_sample(&[1.5, -2.0], 20.0, &[0.3, 0.4]);
        assert!((late[0] - 0.3).abs() < 1e-8 && (late[1] - 0.4).abs() < 1e-8);
        let n = 100_000;
        let mut rng = stream(1, &[]);
        for &t in &[2f64.ln(), 0.2, 1.5] {
            let ys: Vec<Vec<f64>> = (0..n)
                .map(|_| {
                    let xs = 4.0 + standard_normal_vec(&mut rng, 1)[0];
                    ou_forward_sample(&[xs], t, &standard_normal_vec(&mut rng, 1))
                })
                .collect();
            let (m, v) = moments(&ys);
            let (wm, wv) = (4.0 * (-t).exp(), 1.0);
            assert!((m - wm).abs() < 4.0 * (wv / n as f64).sqrt());
            assert!((v - wv).abs() < 4.0 * wv * (2.0 / n as f64).sqrt());
        }
    }

    #[test]
    fn time_sampling_ranges() {
        let mut rng = stream(2, &[]);
        for dist in [TimeDist::Uniform, TimeDist::Exponential] {
            let cfg = DiffusionConfig { time_dist: dist, ..Default::default() };
            for _ in 0..1000 {
                let t = cfg.sample_time(&mut rng);
                assert!(t >= cfg.t_min && t <= cfg.horizon);
            }
        }
        assert!(DiffusionConfig { t_min: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn zero_score_and_gradient_check() {
        let cfg = DiffusionConfig::default();
        let xs: Vec<Vec<f64>> = (0..8).map(|i| vec![i as f64 * 0.3 - 1.0, 0.5]).collect();
        let zero = VelocityField::mlp(2, &[6], 1, 0.0).unwrap();
        let r = score_matching_batch(&zero, &xs, &cfg, &mut stream(3, &[])).unwrap();
        assert_eq!(r.loss_value, 0.0);
        assert!(r.grad.norm() > 0.0);

        let s = VelocityField::mlp(2, &[6, 6], 2, 1.0).unwrap();
        let times: Vec<f64> = (0..8).map(|i| 0.1 + 0.3 * i as f64).collect();
        let b = score_loss_at(&s, &xs, &times, None).unwrap();
        let mut rng = stream(4, &[]);
        for _ in 0..3 {
            let u = standard_normal_vec(&mut rng, s.n_params());
            let eps = 1e-4;
            let sh = |e: f64| s.with_params(s.params().iter().zip(&u).map(|(a, c)| a + e * c).collect()).unwrap();
            let fd = (score_loss_at(&sh(eps), &xs, &times, None).unwrap().loss_value
                - score_loss_at(&sh(-eps), &xs, &times, None).unwrap().loss_value)
                / (2.0 * eps);
            let an: f64 = b.grad.values.iter().zip(&u).map(|(a, c)| a * c).sum();
            assert!((an - fd).abs() / fd.abs().max(1e-3) < 1e-4);
        }
    }

    #[test]
    fn exact_affine_score_is_a_minimizer() {
        // target N(0, 3); at fixed time t the score is -x / C(t)
        let t = 0.4;
        let c = 3.0 * (-2.0 * t as f64).exp() + 1.0 - (-2.0 * t as f64).exp();
        let n = 100_000;
        let mut rng = stream(5, &[]);
        let ys: Vec<Vec<f64>> = (0..n).map(|_| vec![c.sqrt() * standard_normal_vec(&mut rng, 1)[0]]).collect();
        let times = vec![t; n];
        let exact = VelocityField::affine(1, &[-1.0 / c], &[0.0]).unwrap();
        let l0 = score_loss_at(&exact, &ys, &times, None).unwrap().loss_value;
        for _ in 0..20 {
            let u = standard_normal_vec(&mut rng, 2);
            let norm = (u[0] * u[0] + u[1] * u[1]).sqrt();
            let p: Vec<f64> = exact.params().iter().zip(&u).map(|(a, b)| a + 0.1 * b / norm).collect();
            let l = score_loss_at(&exact.with_params(p).unwrap(), &ys, &times, None).unwrap().loss_value;
            assert!(l > l0);
        }
    }

    #[test]
    fn is_variant_reductions() {
        let b = TargetModel::standard_normal(1).unwrap();
        let cfg = DiffusionConfig::default();
        let s = VelocityField::mlp(1, &[5], 3, 1.0).unwrap();
        let xs = b.sample_base(32, &mut stream(6, &[])).unwrap();
        let g = TimeGrid::unit(8).unwrap();
        let plain = score_matching_batch(&s, &xs, &cfg, &mut stream(7, &[])).unwrap();
        let weighted =
            score_matching_is_batch(&s, &VelocityField::zero(1).unwrap(), &b, &b, &xs, &g, &cfg, &mut stream(7, &[]))
                .unwrap();
        assert!((plain.loss_value - weighted.loss_value).abs() < 1e-12);
        for (a, c) in plain.grad.values.iter().zip(&weighted.grad.values) {
            assert!((a - c).abs() < 1e-12 * c.abs().max(1.0));
        }

        // one dominant weight: the loss is that sample's loss
        let t = TargetModel::double_well(1, 2.0).unwrap();
        let pts = vec![vec![1.0], vec![30.0], vec![-25.0]];
        let r = interpolant_is_batch(&s, &VelocityField::zero(1).unwrap(), &t, &b, &pts, &g, &InterpolantSchedule::Linear, &mut stream(8, &[]))
            .unwrap();
        let t0: f64 = stream(8, &[]).random();
        let single = interpolant_loss_at(&s, &[(vec![1.0], vec![1.0])], &[t0], &InterpolantSchedule::Linear, None).unwrap();
        assert!((r.loss_value - single.loss_value).abs() < 1e-10);
    }

    #[test]
    fn reverse_sde_recovers_gaussian() {
        let mix = GaussianMixture::isotropic(1, vec![1.0], vec![vec![4.0]], &[1.0]).unwrap();
        let s = VelocityField::mixture_score(mix);
        let cfg = DiffusionConfig::default();
        let n = 20_000;
        let xs = reverse_sde_sample(&s, &cfg, n, &mut stream(9, &[])).unwrap();
        let (m, v) = moments(&xs);
        assert!((m - 4.0).abs() < 4.0 / (n as f64).sqrt() + 0.02, "mean {m}");
        assert!((v - 1.0).abs() < 0.05, "var {v}");

        let stationary = VelocityField::scalar_linear(1, -1.0).unwrap();
        let ys = reverse_sde_sample(&stationary, &cfg, n, &mut stream(10, &[])).unwrap();
        let (m, v) = moments(&ys);
        assert!(m.abs() < 4.0 / (n as f64).sqrt());
        assert!((v - 1.0).abs() < 0.05);
    }

    #[test]
    fn flow_and_sde_agree_on_two_modes() {
        let mix = GaussianMixture::isotropic(1, vec![0.5, 0.5], vec![vec![-2.0], vec![2.0]], &[0.25, 0.25]).unwrap();
        let s = VelocityField::mixture_score(mix);
        let cfg = DiffusionConfig::default();
        let n = 20_000;
        let a = reverse_sde_sample(&s, &cfg, n, &mut stream(11, &[])).unwrap();
        let b = probability_flow_sample(&s, &cfg, n, 64, &mut stream(12, &[])).unwrap();
        for xs in [&a, &b] {
            let right = xs.iter().filter(|x| x[0] > 0.0).count() as f64 / n as f64;
            assert!((right - 0.5).abs() < 0.02, "{right}");
            let m2 = xs.iter().map(|x| x[0] * x[0]).sum::<f64>() / n as f64;
            assert!((m2 - 4.25).abs() < 0.1, "{m2}");
        }
    }

    #[test]
    fn interpolant_points_and_oracle() {
        let s = InterpolantSchedule::Linear;
        let (x0, d0) = interpolant_point(&[1.0], &[3.0], 0.0, &s);
        assert_eq!((x0, d0), (vec![1.0], vec![2.0]));
        assert_eq!(interpolant_point(&[1.0], &[3.0], 1.0, &s).0, vec![3.0]);
        let (xt, xd) = interpolant_point(&[0.0], &[2.0], 0.25, &s);
        assert_eq!((xt, xd), (vec![0.5], vec![2.0]));
        let tr = InterpolantSchedule::Trigonometric;
        assert!((tr.alpha(1.0)).abs() < 1e-15 && (tr.beta(0.0)).abs() < 1e-15);
        assert!((gaussian_interpolant_velocity_oracle(1.0, 2.0, &s, 0.5, &[1.0])[0] - 1.2).abs() < 1e-15);
        assert_eq!(gaussian_interpolant_velocity_oracle(1.5, 1.5, &s, 0.5, &[0.7])[0], 0.0);
        let f = VelocityField::zero(1).unwrap();
        let r = interpolant_batch(&f, &[(vec![0.1], vec![0.4])], &s, &mut stream(1, &[])).unwrap();
        assert_eq!(r.loss_value, 0.0);
    }

    #[test]
    fn interpolant_gradient_check() {
        let f = VelocityField::mlp(2, &[5, 4], 3, 1.0).unwrap();
        let mut rng = stream(13, &[]);
        let pairs: Vec<(Vec<f64>, Vec<f64>)> =
            (0..6).map(|_| (standard_normal_vec(&mut rng, 2), standard_normal_vec(&mut rng, 2))).collect();
        let times: Vec<f64> = (0..6).map(|i| i as f64 / 5.0).collect();
        let s = InterpolantSchedule::Linear;
        let b = interpolant_loss_at(&f, &pairs, &times, &s, None).unwrap();
        for _ in 0..3 {
            let u = standard_normal_vec(&mut rng, f.n_params());
            let sh = |e: f64| f.with_params(f.params().iter().zip(&u).map(|(a, c)| a + e * c).collect()).unwrap();
            let fd = (interpolant_loss_at(&sh(1e-4), &pairs, &times, &s, None).unwrap().loss_value
                - interpolant_loss_at(&sh(-1e-4), &pairs, &times, &s, None).unwrap().loss_value)
                / 2e-4;
            let an: f64 = b.grad.values.iter().zip(&u).map(|(a, c)| a * c).sum();
            assert!((an - fd).abs() / fd.abs().max(1e-3) < 1e-4);
        }
    }

    #[test]
    fn oracle_velocity_transports_density() {
        // characteristics of v = c(t) x carry N(0, 1) to N(0, 4) at t = 1
        let s = InterpolantSchedule::Linear;
        let c = |t: f64| gaussian_interpolant_velocity_oracle(1.0, 2.0, &s, t, &[1.0])[0];
        let n = 400;
        let h = 1.0 / n as f64;
        let mut logjac = 0.0f64;
        for k in 0..n {
            let t = k as f64 * h;
            logjac += h / 6.0 * (c(t) + 4.0 * c(t + 0.5 * h) + c(t + h));
        }
        let scale = logjac.exp();
        let rho1 = |x: f64| {
            let x0 = x / scale;
            (-0.5 * x0 * x0).exp() / (2.0 * std::f64::consts::PI).sqrt() / scale
        };
        let target = |x: f64| (-x * x / 8.0).exp() / (8.0 * std::f64::consts::PI).sqrt();
        let dx = 0.01;
        let l1: f64 = (-2000..=2000).map(|i| (rho1(i as f64 * dx) - target(i as f64 * dx)).abs() * dx).sum();
        assert!(l1 < 1e-2, "{l1}");
    }
}
