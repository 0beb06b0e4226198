//! Probability-flow integration and adjoint gradients.
//!
//! States are advanced with classic fixed-step RK4 on the augmented state
//! `(x, l)` where `l' = div v(t, x)`. Gradients are the exact gradients of the
//! discrete (RK4) losses, obtained by running the adjoint of the RK4 scheme
//! over the stored stage states.
//!
//! Log-Jacobians are oriented integrals: for a grid from `t0` to `t1` the
//! value is `integral_{t0}^{t1} div v(t, X_t) dt` whichever way the path was
//! traversed, so `log rho_{t1}(X_{t1}(x)) = log rho_{t0}(x) - logjac`.

use crate::error::{check_dim, check_finite, Error, Result};
use crate::field::{ParamGrad, Tape, VelocityField};
use crate::targets::TargetModel;

/// Uniform time discretization from `t0` (base side) to `t1` (target side).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub n_steps: usize,
    pub t0: f64,
    pub t1: f64,
}

impl TimeGrid {
    pub fn new(n_steps: usize, t0: f64, t1: f64) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::InvalidArgument("time grid needs at least one step".into()));
        }
        if !t0.is_finite() || !t1.is_finite() || t0 == t1 {
            return Err(Error::InvalidArgument(format!("bad time interval [{t0}, {t1}]")));
        }
        Ok(Self { n_steps, t0, t1 })
    }

    /// Grid on `[0, 1]`.
    pub fn unit(n_steps: usize) -> Result<Self> {
        Self::new(n_steps, 0.0, 1.0)
    }

    pub fn h(&self) -> f64 {
        (self.t1 - self.t0) / self.n_steps as f64
    }
}

/// States kept for the adjoint pass. `stages[n]` holds the four RK4 stage
/// states of step `n`; node times are `start + n * h`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub start: f64,
    pub h: f64,
    pub nodes: Vec<Vec<f64>>,
    pub stages: Vec<[Vec<f64>; 4]>,
    pub(crate) tapes: Vec<[Option<Tape>; 4]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowResult {
    pub endpoint: Vec<f64>,
    /// Oriented divergence integral from `grid.t0` to `grid.t1`.
    pub logjac: f64,
    pub trajectory: Trajectory,
}

/// Per-sample adjoint gradient with its side products.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGrad {
    pub grad: ParamGrad,
    pub endpoint: Vec<f64>,
    pub logjac: f64,
    /// Per-sample loss value whose gradient `grad` is.
    pub loss: f64,
    /// Potential evaluated at the endpoint.
    pub potential: f64,
}

/// RK4 from `start` with signed step `h`; returns endpoint and accumulated `sum h * div`.
fn rk4(
    f: &VelocityField,
    x0: &[f64],
    start: f64,
    h: f64,
    n_steps: usize,
    mut store: Option<&mut Trajectory>,
) -> Result<(Vec<f64>, f64)> {
    let d = x0.len();
    let mut x = x0.to_vec();
    let mut l = 0.0;
    let mut tmp = vec![0.0; d];
    if let Some(tr) = store.as_deref_mut() {
        tr.nodes.push(x.clone());
    }
    for n in 0..n_steps {
        let t = start + n as f64 * h;
        let tm = t + 0.5 * h;
        let te = t + h;
        let (k1, c1, t1) = f.eval_taped(t, &x);
        for i in 0..d {
            tmp[i] = x[i] + 0.5 * h * k1[i];
        }
        let x2 = tmp.clone();
        let (k2, c2, t2) = f.eval_taped(tm, &x2);
        for i in 0..d {
            tmp[i] = x[i] + 0.5 * h * k2[i];
        }
        let x3 = tmp.clone();
        let (k3, c3, t3) = f.eval_taped(tm, &x3);
        for i in 0..d {
            tmp[i] = x[i] + h * k3[i];
        }
        let x4 = tmp.clone();
        let (k4, c4, t4) = f.eval_taped(te, &x4);
        let x_prev = x.clone();
        for i in 0..d {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        l += h / 6.0 * (c1 + 2.0 * c2 + 2.0 * c3 + c4);
        if !l.is_finite() || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::FlowDivergence { step: n });
        }
        if let Some(tr) = store.as_deref_mut() {
            tr.stages.push([x_prev, x2, x3, x4]);
            tr.tapes.push([t1, t2, t3, t4]);
            tr.nodes.push(x.clone());
        }
    }
    Ok((x, l))
}

fn check_start(f: &VelocityField, x: &[f64]) -> Result<()> {
    check_dim(f.dim(), x.len())?;
    check_finite("flow initial state", x)
}

fn integrate(f: &VelocityField, x: &[f64], start: f64, h: f64, n: usize) -> Result<FlowResult> {
    check_start(f, x)?;
    let mut tr = Trajectory {
        start,
        h,
        nodes: Vec::with_capacity(n + 1),
        stages: Vec::with_capacity(n),
        tapes: Vec::with_capacity(n),
    };
    let (endpoint, l) = rk4(f, x, start, h, n, Some(&mut tr))?;
    Ok(FlowResult { endpoint, logjac: l, trajectory: tr })
}

/// Solves `X' = v(t, X)` from `grid.t0` to `grid.t1`.
pub fn integrate_forward(f: &VelocityField, x0: &[f64], grid: &TimeGrid) -> Result<FlowResult> {
    integrate(f, x0, grid.t0, grid.h(), grid.n_steps)
}

/// Solves the same ODE from `grid.t1` back to `grid.t0`. The reported
/// `logjac` is the oriented integral from `t0` to `t1` along that path.
pub fn integrate_backward(f: &VelocityField, x1: &[f64], grid: &TimeGrid) -> Result<FlowResult> {
    let mut r = integrate(f, x1, grid.t1, -grid.h(), grid.n_steps)?;
    r.logjac = -r.logjac;
    Ok(r)
}

/// Endpoint and log-Jacobian of the forward map, without storing the path.
pub fn flow_forward(f: &VelocityField, x0: &[f64], grid: &TimeGrid) -> Result<(Vec<f64>, f64)> {
    check_start(f, x0)?;
    rk4(f, x0, grid.t0, grid.h(), grid.n_steps, None)
}

/// Endpoint and (oriented) log-Jacobian of the backward map, without storing the path.
pub fn flow_backward(f: &VelocityField, x1: &[f64], grid: &TimeGrid) -> Result<(Vec<f64>, f64)> {
    check_start(f, x1)?;
    let (x, l) = rk4(f, x1, grid.t1, -grid.h(), grid.n_steps, None)?;
    Ok((x, -l))
}

/// Endpoint of the forward map only; skips the divergence.
pub fn flow_map(f: &VelocityField, x0: &[f64], grid: &TimeGrid) -> Result<Vec<f64>> {
    check_start(f, x0)?;
    let (d, h) = (x0.len(), grid.h());
    let mut x = x0.to_vec();
    let mut tmp = vec![0.0; d];
    for n in 0..grid.n_steps {
        let t = grid.t0 + n as f64 * h;
        let k1 = f.velocity_unchecked(t, &x);
        for i in 0..d {
            tmp[i] = x[i] + 0.5 * h * k1[i];
        }
        let k2 = f.velocity_unchecked(t + 0.5 * h, &tmp);
        for i in 0..d {
            tmp[i] = x[i] + 0.5 * h * k2[i];
        }
        let k3 = f.velocity_unchecked(t + 0.5 * h, &tmp);
        for i in 0..d {
            tmp[i] = x[i] + h * k3[i];
        }
        let k4 = f.velocity_unchecked(t + h, &tmp);
        for i in 0..d {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::FlowDivergence { step: n });
        }
    }
    Ok(x)
}

/// `X_{t1}(x0)` and `log rho_{t1}` there, for `x0` drawn from `base`.
pub fn pushforward_logdensity(
    f: &VelocityField,
    base: &TargetModel,
    x0: &[f64],
    grid: &TimeGrid,
) -> Result<(Vec<f64>, f64)> {
    let lb = base.log_density(x0)?;
    let (x1, lj) = flow_forward(f, x0, grid)?;
    Ok((x1, lb - lj))
}

/// `log rho_{t1}(x1)` of the pushforward of `base`, evaluated by a backward solve.
pub fn pullback_logdensity(
    f: &VelocityField,
    base: &TargetModel,
    x1: &[f64],
    grid: &TimeGrid,
) -> Result<f64> {
    let (x0, lj) = flow_backward(f, x1, grid)?;
    Ok(base.log_density(&x0)? - lj)
}

/// Adjoint of the RK4 scheme for a loss `Phi(x_N) + mu * l_N`, where `l_N` is
/// the accumulated `sum h * div` along the stored path. `lambda` is `grad Phi(x_N)`.
/// Returns the parameter gradient and the gradient with respect to the initial state.
pub fn rk4_adjoint(
    f: &VelocityField,
    tr: &Trajectory,
    lambda: &[f64],
    mu: f64,
) -> Result<(ParamGrad, Vec<f64>)> {
    let d = f.dim();
    check_dim(d, lambda.len())?;
    let h = tr.h;
    let w = [h / 6.0, h / 3.0, h / 3.0, h / 6.0];
    let mut grad = ParamGrad::zeros(f.n_params());
    let mut lam = lambda.to_vec();
    let mut kbar = vec![0.0; d];
    for n in (0..tr.stages.len()).rev() {
        let t = tr.start + n as f64 * h;
        let times = [t, t + 0.5 * h, t + 0.5 * h, t + h];
        let st = &tr.stages[n];
        let mut acc = vec![0.0; d];
        let mut xi: Vec<f64> = Vec::new();
        for s in (0..4).rev() {
            // seed of stage s: its own weight plus the path into stage s + 1
            let coupling = match s {
                3 => 0.0,
                2 => h,
                _ => 0.5 * h,
            };
            for i in 0..d {
                kbar[i] = w[s] * lam[i] + if s == 3 { 0.0 } else { coupling * xi[i] };
            }
            let tape = tr.tapes.get(n).and_then(|tp| tp[s].as_ref());
            xi = f.vjp_taped(tape, times[s], &st[s], &kbar, w[s] * mu, Some(&mut grad.values));
            for i in 0..d {
                acc[i] += xi[i];
            }
        }
        for i in 0..d {
            lam[i] += acc[i];
        }
        if lam.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("adjoint state at step {n}")));
        }
    }
    check_finite("adjoint parameter gradient", &grad.values)?;
    Ok((grad, lam))
}

/// Gradient of the per-sample reverse-KL loss `U*(X_1(x0)) - logjac`.
pub fn reverse_kl_sample_grad(
    f: &VelocityField,
    target: &TargetModel,
    x0: &[f64],
    grid: &TimeGrid,
) -> Result<SampleGrad> {
    check_dim(target.dim(), f.dim())?;
    let r = integrate_forward(f, x0, grid)?;
    let u = target.potential_unchecked(&r.endpoint);
    let lambda = target.grad_potential_unchecked(&r.endpoint);
    if !u.is_finite() {
        return Err(Error::NonFinite("target potential at flow endpoint".into()));
    }
    let (grad, _) = rk4_adjoint(f, &r.trajectory, &lambda, -1.0)?;
    Ok(SampleGrad { grad, loss: u - r.logjac, endpoint: r.endpoint, logjac: r.logjac, potential: u })
}

/// Gradient of the per-sample forward-KL loss `U_b(Xbar_0(x*)) + logjac`, i.e.
/// `-log rho_1(x*)` up to a constant. The endpoint is the pulled-back point
/// `Xbar_0(x*)`; `logjac` is oriented from `t0` to `t1`.
pub fn forward_kl_sample_grad(
    f: &VelocityField,
    base: &TargetModel,
    xstar: &[f64],
    grid: &TimeGrid,
) -> Result<SampleGrad> {
    check_dim(base.dim(), f.dim())?;
    let r = integrate_backward(f, xstar, grid)?;
    let u = base.potential_unchecked(&r.endpoint);
    let lambda = base.grad_potential_unchecked(&r.endpoint);
    // the sum accumulated along the backward path is -logjac
    let (grad, _) = rk4_adjoint(f, &r.trajectory, &lambda, -1.0)?;
    Ok(SampleGrad { grad, loss: u + r.logjac, endpoint: r.endpoint, logjac: r.logjac, potential: u })
}
