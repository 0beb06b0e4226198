//! Metropolis-Hastings kernels: the transport-assisted independence sampler,
//! a Gaussian random walk, and their alternation, plus chain diagnostics.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, Error, Result};
use crate::field::VelocityField;
use crate::flow::{flow_backward, flow_forward, TimeGrid};
use crate::importance::Observable;
use crate::par::map_indexed;
use crate::rng::{standard_normal_vec, stream, Stream};
use crate::targets::TargetModel;

/// Transport quantities of a state produced by an independence proposal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportCache {
    pub base_point: Vec<f64>,
    pub log_jac: f64,
    pub u_star: f64,
    pub u_b: f64,
    /// Fingerprint of the field parameters the cache was computed with.
    pub field_tag: u64,
}

impl TransportCache {
    /// `log w = -U*(x) + U_b(x_b) + logjac`
    pub fn log_weight(&self) -> f64 {
        -self.u_star + self.u_b + self.log_jac
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainState {
    pub position: Vec<f64>,
    pub cached: Option<TransportCache>,
    pub step_index: u64,
}

impl ChainState {
    pub fn new(position: Vec<f64>) -> Self {
        Self { position, cached: None, step_index: 0 }
    }
}

/// Fingerprint identifying a field's kind and parameters.
pub fn field_tag(f: &VelocityField) -> u64 {
    let mut h = DefaultHasher::new();
    f.kind_name().hash(&mut h);
    f.dim().hash(&mut h);
    for p in f.params() {
        p.to_bits().hash(&mut h);
    }
    h.finish()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub accepted: bool,
    pub log_ratio: f64,
    /// The proposal could not be evaluated and was rejected.
    pub failed: bool,
}

fn transport_log_weight(
    f: &VelocityField,
    target: &TargetModel,
    base: &TargetModel,
    xb: &[f64],
    grid: &TimeGrid,
    tag: u64,
) -> Result<(Vec<f64>, TransportCache)> {
    let (x1, lj) = flow_forward(f, xb, grid)?;
    let cache = TransportCache {
        base_point: xb.to_vec(),
        log_jac: lj,
        u_star: target.potential_unchecked(&x1),
        u_b: base.potential_unchecked(xb),
        field_tag: tag,
    };
    if cache.log_weight().is_nan() || cache.u_star.is_infinite() {
        return Err(Error::NonFinite("proposal log weight".into()));
    }
    Ok((x1, cache))
}

/// Log weight of a state under the pushforward of `base` by `f`, via a backward solve.
pub fn state_log_weight(
    f: &VelocityField,
    target: &TargetModel,
    base: &TargetModel,
    x: &[f64],
    grid: &TimeGrid,
) -> Result<f64> {
    let (x0, lj) = flow_backward(f, x, grid)?;
    let lw = -target.potential_unchecked(x) + base.potential_unchecked(&x0) + lj;
    if lw.is_nan() {
        return Err(Error::NonFinite("state log weight".into()));
    }
    Ok(lw)
}

fn current_log_weight(
    state: &ChainState,
    f: &VelocityField,
    target: &TargetModel,
    base: &TargetModel,
    grid: &TimeGrid,
    tag: u64,
) -> f64 {
    match &state.cached {
        Some(c) if c.field_tag == tag => c.log_weight(),
        // a state the flow cannot reach is left as soon as any proposal is valid
        _ => state_log_weight(f, target, base, &state.position, grid).unwrap_or(f64::NEG_INFINITY),
    }
}

/// One independence step with proposal `X_1(x_b)`, `x_b ~ base`.
///
/// `R = log w(proposal) - log w(current)`. The current weight comes from the
/// cache when the state was produced by a proposal under the same field and
/// from a backward solve otherwise. Proposals that fail to integrate are rejected.
pub fn independence_mh_step(
    state: &ChainState,
    f: &VelocityField,
    target: &TargetModel,
    base: &TargetModel,
    grid: &TimeGrid,
    rng: &mut Stream,
) -> Result<(ChainState, StepOutcome)> {
    check_dim(target.dim(), state.position.len())?;
    check_dim(target.dim(), f.dim())?;
    let xb = base.sample_base(1, rng)?.pop().expect("one sample");
    let u: f64 = rng.random();
    let tag = field_tag(f);
    let next_index = state.step_index + 1;
    let proposal = match transport_log_weight(f, target, base, &xb, grid, tag) {
        Ok(p) => p,
        Err(e) if e.is_numerical() => {
            let mut s = state.clone();
            s.step_index = next_index;
            return Ok((s, StepOutcome { accepted: false, log_ratio: f64::NEG_INFINITY, failed: true }));
        }
        Err(e) => return Err(e),
    };
    let lw_cur = current_log_weight(state, f, target, base, grid, tag);
    let r = proposal.1.log_weight() - lw_cur;
    if u.ln() < r {
        let s = ChainState { position: proposal.0, cached: Some(proposal.1), step_index: next_index };
        Ok((s, StepOutcome { accepted: true, log_ratio: r, failed: false }))
    } else {
        let mut s = state.clone();
        s.step_index = next_index;
        Ok((s, StepOutcome { accepted: false, log_ratio: r, failed: false }))
    }
}

/// `-U*(y) + U*(x)`, the log acceptance ratio of a symmetric proposal.
pub fn random_walk_log_ratio(target: &TargetModel, x: &[f64], y: &[f64]) -> f64 {
    -target.potential_unchecked(y) + target.potential_unchecked(x)
}

/// One Gaussian random-walk step with standard deviation `step_size`.
/// Any transport cache is dropped, accepted or not.
pub fn random_walk_mh_step(
    state: &ChainState,
    target: &TargetModel,
    step_size: f64,
    rng: &mut Stream,
) -> Result<(ChainState, StepOutcome)> {
    check_dim(target.dim(), state.position.len())?;
    if !(step_size >= 0.0 && step_size.is_finite()) {
        return Err(Error::InvalidArgument(format!("step size must be finite and >= 0, got {step_size}")));
    }
    let xi = standard_normal_vec(rng, state.position.len());
    let u: f64 = rng.random();
    let y: Vec<f64> = state.position.iter().zip(&xi).map(|(a, b)| a + step_size * b).collect();
    let r = random_walk_log_ratio(target, &state.position, &y);
    let failed = r.is_nan();
    let accepted = !failed && u.ln() < r;
    let s = ChainState {
        position: if accepted { y } else { state.position.clone() },
        cached: None,
        step_index: state.step_index + 1,
    };
    Ok((s, StepOutcome { accepted, log_ratio: r, failed }))
}

#[derive(Debug, Clone)]
pub enum Kernel {
    RandomWalk { step_size: f64 },
    Independence { field: Arc<VelocityField>, grid: TimeGrid },
    /// `rw_steps` random-walk steps followed by one independence step.
    Mixed { step_size: f64, rw_steps: usize, field: Arc<VelocityField>, grid: TimeGrid },
}

impl Kernel {
    pub fn step(
        &self,
        state: &ChainState,
        target: &TargetModel,
        base: &TargetModel,
        rng: &mut Stream,
    ) -> Result<(ChainState, StepOutcome)> {
        match self {
            Kernel::RandomWalk { step_size } => random_walk_mh_step(state, target, *step_size, rng),
            Kernel::Independence { field, grid } => independence_mh_step(state, field, target, base, grid, rng),
            Kernel::Mixed { step_size, rw_steps, field, grid } => {
                if state.step_index % (*rw_steps as u64 + 1) == *rw_steps as u64 {
                    independence_mh_step(state, field, target, base, grid, rng)
                } else {
                    random_walk_mh_step(state, target, *step_size, rng)
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub step: u64,
    pub position: Vec<f64>,
    pub accepted: bool,
    pub log_ratio: f64,
}

/// Integrated autocorrelation time of one series.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Iact {
    pub value: f64,
    /// Number of lags summed.
    pub window: usize,
    /// Set when the series is constant or the positive sequence never ended.
    pub capped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainStats {
    pub n_steps: usize,
    pub n_accepted: usize,
    pub n_failed: usize,
    pub acceptance_rate: f64,
    pub n_samples: usize,
    /// One entry per observable.
    pub observables: Vec<String>,
    pub iact: Vec<Iact>,
    pub ess: Vec<f64>,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    /// No samples were available for the statistics.
    pub empty: bool,
}

#[derive(Debug, Clone)]
pub struct ChainRun {
    pub samples: Vec<Vec<f64>>,
    pub stats: ChainStats,
    pub trace: Vec<TraceRecord>,
    pub final_state: ChainState,
}

/// Default observables: each coordinate.
pub fn coordinate_observables(dim: usize) -> Vec<Observable> {
    (0..dim).map(|coord| Observable::MeanCoordinate { coord }).collect()
}

/// Runs `n_steps` kernel steps and keeps the states after `burn_in`.
#[allow(clippy::too_many_arguments)]
pub fn run_chain(
    kernel: &Kernel,
    target: &TargetModel,
    base: &TargetModel,
    init: ChainState,
    n_steps: usize,
    burn_in: usize,
    rng: &mut Stream,
) -> Result<ChainRun> {
    check_dim(target.dim(), init.position.len())?;
    check_finite("initial state", &init.position)?;
    if burn_in > n_steps {
        return Err(Error::InvalidArgument(format!("burn_in {burn_in} exceeds n_steps {n_steps}")));
    }
    let mut state = init;
    let mut samples = Vec::with_capacity(n_steps - burn_in);
    let mut trace = Vec::with_capacity(n_steps);
    let (mut acc, mut failed) = (0usize, 0usize);
    for k in 0..n_steps {
        let (s, out) = kernel.step(&state, target, base, rng)?;
        state = s;
        acc += out.accepted as usize;
        failed += out.failed as usize;
        trace.push(TraceRecord {
            step: state.step_index,
            position: state.position.clone(),
            accepted: out.accepted,
            log_ratio: out.log_ratio,
        });
        if k >= burn_in {
            samples.push(state.position.clone());
        }
    }
    let obs = coordinate_observables(target.dim());
    let mut stats = chain_diagnostics(&samples, &obs)?;
    stats.n_steps = n_steps;
    stats.n_accepted = acc;
    stats.n_failed = failed;
    stats.acceptance_rate = if n_steps == 0 { 0.0 } else { acc as f64 / n_steps as f64 };
    Ok(ChainRun { samples, stats, trace, final_state: state })
}

/// Independent chains in parallel, chain `c` driven by `stream(seed, [c])`.
pub fn run_chains(
    kernel: &Kernel,
    target: &TargetModel,
    base: &TargetModel,
    inits: Vec<ChainState>,
    n_steps: usize,
    burn_in: usize,
    seed: u64,
) -> Result<Vec<ChainRun>> {
    let runs = map_indexed(inits.len(), |c| {
        let mut rng = stream(seed, &[c as u64]);
        run_chain(kernel, target, base, inits[c].clone(), n_steps, burn_in, &mut rng)
    });
    runs.into_iter().collect()
}

/// Pooled statistics over several chains, combined in chain order. IACT is
/// averaged over chains; moments and acceptance are pooled.
pub fn pool_stats(runs: &[ChainRun]) -> Result<ChainStats> {
    let first = runs.first().ok_or_else(|| Error::InvalidArgument("no chains to pool".into()))?;
    let obs_n = first.stats.observables.len();
    let mut out = first.stats.clone();
    let n_chains = runs.len() as f64;
    out.n_steps = runs.iter().map(|r| r.stats.n_steps).sum();
    out.n_accepted = runs.iter().map(|r| r.stats.n_accepted).sum();
    out.n_failed = runs.iter().map(|r| r.stats.n_failed).sum();
    out.n_samples = runs.iter().map(|r| r.stats.n_samples).sum();
    out.acceptance_rate = if out.n_steps == 0 { 0.0 } else { out.n_accepted as f64 / out.n_steps as f64 };
    out.empty = out.n_samples == 0;
    for j in 0..obs_n {
        out.iact[j].value = runs.iter().map(|r| r.stats.iact[j].value).sum::<f64>() / n_chains;
        out.iact[j].capped = runs.iter().any(|r| r.stats.iact[j].capped);
        out.ess[j] = runs.iter().map(|r| r.stats.ess[j]).sum();
        let n = out.n_samples as f64;
        let mean = runs.iter().map(|r| r.stats.mean[j] * r.stats.n_samples as f64).sum::<f64>() / n;
        // total sum of squares from per-chain means and variances
        let ss = runs
            .iter()
            .map(|r| {
                let m = r.stats.n_samples as f64;
                let within = if m > 1.0 { (m - 1.0) * r.stats.variance[j] } else { 0.0 };
                let between = if m > 0.0 { m * (r.stats.mean[j] - mean).powi(2) } else { 0.0 };
                within + between
            })
            .sum::<f64>();
        out.mean[j] = mean;
        out.variance[j] = if n > 1.0 { ss / (n - 1.0) } else { f64::NAN };
    }
    Ok(out)
}

/// IACT by Geyer's initial positive sequence: `tau = -1 + 2 sum_k (rho_2k + rho_2k+1)`,
/// stopped at the first non-positive pair.
pub fn iact(series: &[f64]) -> Iact {
    let n = series.len();
    if n < 2 {
        return Iact { value: 1.0, window: 0, capped: true };
    }
    let mean = series.iter().sum::<f64>() / n as f64;
    let m = (2 * n).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = series.iter().map(|x| Complex::new(x - mean, 0.0)).collect();
    buf.resize(m, Complex::new(0.0, 0.0));
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(m).process(&mut buf);
    for c in buf.iter_mut() {
        *c = Complex::new(c.norm_sqr(), 0.0);
    }
    planner.plan_fft_inverse(m).process(&mut buf);
    let c0 = buf[0].re;
    if !(c0 > 1e-300 * n as f64) {
        return Iact { value: n as f64, window: n, capped: true };
    }
    let rho = |k: usize| buf[k].re / c0;
    let mut sum = 0.0f64;
    let mut k = 0;
    while 2 * k + 1 < n {
        let g = rho(2 * k) + rho(2 * k + 1);
        if g <= 0.0 {
            return Iact { value: (2.0 * sum - 1.0).max(1.0 / n as f64), window: 2 * k, capped: false };
        }
        sum += g;
        k += 1;
    }
    Iact { value: (2.0 * sum - 1.0).clamp(1.0 / n as f64, n as f64), window: 2 * k, capped: true }
}

/// IACT, ESS `n / IACT` and moments for each observable over the samples.
/// Acceptance fields are left at zero.
pub fn chain_diagnostics(samples: &[Vec<f64>], observables: &[Observable]) -> Result<ChainStats> {
    if let Some(x) = samples.first() {
        for o in observables {
            o.check(x.len())?;
        }
    }
    let n = samples.len();
    let mut stats = ChainStats {
        n_steps: n,
        n_accepted: 0,
        n_failed: 0,
        acceptance_rate: 0.0,
        n_samples: n,
        observables: observables.iter().map(|o| o.name()).collect(),
        iact: Vec::with_capacity(observables.len()),
        ess: Vec::with_capacity(observables.len()),
        mean: Vec::with_capacity(observables.len()),
        variance: Vec::with_capacity(observables.len()),
        empty: n == 0,
    };
    for o in observables {
        let s: Vec<f64> = samples.iter().map(|x| o.eval(x)).collect();
        let (mean, var) = welford(&s);
        let t = iact(&s);
        stats.ess.push(if n == 0 { 0.0 } else { n as f64 / t.value });
        stats.iact.push(t);
        stats.mean.push(mean);
        stats.variance.push(var);
    }
    Ok(stats)
}

fn welford(xs: &[f64]) -> (f64, f64) {
    let (mut mean, mut m2) = (0.0, 0.0);
    for (i, x) in xs.iter().enumerate() {
        let d = x - mean;
        mean += d / (i + 1) as f64;
        m2 += d * (x - mean);
    }
    match xs.len() {
        0 => (f64::NAN, f64::NAN),
        1 => (mean, f64::NAN),
        n => (mean, m2 / (n - 1) as f64),
    }
}
