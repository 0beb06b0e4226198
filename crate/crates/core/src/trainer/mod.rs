//! Stochastic-gradient training of velocity and score fields.
//!
//! Every iteration `k` draws its randomness from streams addressed by
//! `(seed, k, ...)`, so a run resumed from a checkpoint retraces the
//! uninterrupted one exactly and the worker count never changes results.

pub mod buffer;
pub mod checkpoint;
pub mod metrics;

use std::sync::Arc;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::field::{ParamGrad, VelocityField};
use crate::flow::{flow_forward, TimeGrid};
use crate::importance::{transport_weights, weight_diagnostics};
use crate::mcmc::{independence_mh_step, ChainState};
use crate::objectives::{
    chi2_batch, forward_kl_batch, forward_kl_is_batch, reverse_kl_batch, BatchGrad, ObjectiveKind,
};
use crate::par::map_indexed;
use crate::rng::stream;
use crate::simfree::{
    interpolant_batch, interpolant_is_batch, score_matching_batch, score_matching_is_batch, DiffusionConfig,
    InterpolantSchedule,
};
use crate::targets::{PotentialKind, TargetModel};

pub use buffer::{Provenance, ReplayBuffer};
pub use checkpoint::{checkpoint_load, checkpoint_save, Checkpoint};
pub use metrics::{config_hash, MetricsRow, MetricsWriter};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LrSchedule {
    Constant {
        h: f64,
    },
    /// `h0 / (1 + k / k0)^power`
    RobbinsMonro {
        h0: f64,
        k0: f64,
        #[serde(default = "one")]
        power: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl LrSchedule {
    pub fn rate(&self, k: u64) -> f64 {
        match *self {
            LrSchedule::Constant { h } => h,
            LrSchedule::RobbinsMonro { h0, k0, power } => h0 / (1.0 + k as f64 / k0).powf(power),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            LrSchedule::Constant { h } => h > 0.0 && h.is_finite(),
            LrSchedule::RobbinsMonro { h0, k0, power } => {
                h0 > 0.0 && h0.is_finite() && k0 > 0.0 && k0.is_finite() && power > 0.0 && power.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid learning rate schedule {self:?}")))
        }
    }

    /// Whether `sum h_k = inf` and `sum h_k^2 < inf`: for `h0 / (1 + k/k0)^p`
    /// this holds exactly when `1/2 < p <= 1`.
    pub fn satisfies_robbins_monro(&self) -> bool {
        match *self {
            LrSchedule::Constant { .. } => false,
            LrSchedule::RobbinsMonro { power, .. } => power > 0.5 && power <= 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Fresh base draws each iteration.
    FreshBase,
    /// Minibatches resampled from a fixed set of target samples.
    Dataset,
    /// Fresh exact draws from a mixture target.
    ExactTarget,
    /// Base draws reweighted through a transport field.
    IsLoop,
    /// Persistent independence Metropolis-Hastings chains under the current field.
    McmcLoop,
}

/// Which parameters produce the importance weights in weighted objectives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    Previous,
    Current,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Optimizer {
    #[default]
    Sgd,
    Adam {
        #[serde(default = "beta1")]
        beta1: f64,
        #[serde(default = "beta2")]
        beta2: f64,
        #[serde(default = "adam_eps")]
        eps: f64,
    },
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn adam_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: ObjectiveKind,
    pub batch_size: usize,
    pub iterations: u64,
    pub lr: LrSchedule,
    pub seed: u64,
    pub source: DataSource,
    pub buffer_capacity: usize,
    /// Fraction of each MCMC batch drawn from the replay buffer.
    pub buffer_mix: f64,
    /// Evaluate the transport ESS every this many iterations (0: only at the end).
    pub eval_every: u64,
    pub eval_samples: usize,
    pub n_steps_train: usize,
    pub n_steps_eval: usize,
    pub weighting: Weighting,
    pub chains: usize,
    /// Start fresh chains every iteration instead of continuing them.
    pub restart_chains: bool,
    pub optimizer: Optimizer,
    pub log_wall_time: bool,
    /// Abort when more than this fraction of a batch fails.
    pub max_drop_fraction: f64,
    pub diffusion: DiffusionConfig,
    pub interpolant: InterpolantSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: ObjectiveKind::ReverseKl,
            batch_size: 256,
            iterations: 1000,
            lr: LrSchedule::Constant { h: 1e-2 },
            seed: 0,
            source: DataSource::FreshBase,
            buffer_capacity: 4096,
            buffer_mix: 0.0,
            eval_every: 0,
            eval_samples: 1024,
            n_steps_train: 32,
            n_steps_eval: 64,
            weighting: Weighting::Previous,
            chains: 4,
            restart_chains: false,
            optimizer: Optimizer::Sgd,
            log_wall_time: false,
            max_drop_fraction: 0.5,
            diffusion: DiffusionConfig::default(),
            interpolant: InterpolantSchedule::Linear,
        }
    }
}

fn allowed_sources(obj: ObjectiveKind) -> &'static [DataSource] {
    use DataSource::*;
    match obj {
        ObjectiveKind::ReverseKl | ObjectiveKind::Chi2 => &[FreshBase],
        ObjectiveKind::ForwardKl => &[Dataset, ExactTarget, McmcLoop],
        ObjectiveKind::ForwardKlIs => &[IsLoop],
        ObjectiveKind::ScoreMatching | ObjectiveKind::Interpolant => &[Dataset, ExactTarget, IsLoop, McmcLoop],
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        self.lr.validate()?;
        if !allowed_sources(self.objective).contains(&self.source) {
            return bad(format!(
                "objective {:?} cannot use data source {:?} (allowed: {:?})",
                self.objective,
                self.source,
                allowed_sources(self.objective)
            ));
        }
        if self.n_steps_train == 0 || self.n_steps_eval == 0 {
            return bad("n_steps_train and n_steps_eval must be >= 1".into());
        }
        if self.eval_samples == 0 {
            return bad("eval_samples must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.buffer_mix) {
            return bad(format!("buffer_mix must lie in [0, 1], got {}", self.buffer_mix));
        }
        if self.chains == 0 {
            return bad("chains must be >= 1".into());
        }
        if !(self.max_drop_fraction > 0.0 && self.max_drop_fraction <= 1.0) {
            return bad(format!("max_drop_fraction must lie in (0, 1], got {}", self.max_drop_fraction));
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0) {
                return bad("adam needs 0 <= beta < 1 and eps > 0".into());
            }
        }
        self.diffusion.validate().map_err(|e| Error::Config(e.to_string()))
    }
}

/// Models a run trains against.
#[derive(Debug, Clone)]
pub struct TrainProblem {
    pub target: TargetModel,
    pub base: TargetModel,
    /// Target-domain samples for the `dataset` source (and replay-buffer seeding).
    pub data: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

/// Everything besides the parameters needed to resume a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub prev_params: Option<Vec<f64>>,
    pub adam: Option<AdamState>,
    pub chains: Vec<ChainState>,
    pub buffer: ReplayBuffer,
}

impl Default for TrainerState {
    fn default() -> Self {
        Self { prev_params: None, adam: None, chains: Vec::new(), buffer: ReplayBuffer::new(0) }
    }
}

/// `theta - h * grad`.
pub fn sgd_step(f: &VelocityField, grad: &ParamGrad, h: f64) -> Result<VelocityField> {
    check_dim(f.n_params(), grad.len())?;
    let p = f.params().iter().zip(&grad.values).map(|(a, g)| a - h * g).collect();
    f.with_params(p)
}

/// Transport used for weighting and proposals: the field itself on `[0, 1]`,
/// or the probability flow of a score field from `T` down to `t_min`.
pub fn transport_of(
    objective: ObjectiveKind,
    f: &VelocityField,
    diffusion: &DiffusionConfig,
    n_steps: usize,
) -> Result<(VelocityField, TimeGrid)> {
    match objective {
        ObjectiveKind::ScoreMatching => {
            Ok((VelocityField::score_to_velocity(f.clone()), diffusion.flow_grid(n_steps)?))
        }
        _ => Ok((f.clone(), TimeGrid::unit(n_steps)?)),
    }
}

/// Fraction `ESS / n` of transport weights over `n` fresh base draws; failed
/// draws count as zero weight.
pub fn transport_ess_fraction(
    f: &VelocityField,
    target: &TargetModel,
    base: &TargetModel,
    grid: &TimeGrid,
    n: usize,
    rng: &mut crate::rng::Stream,
) -> Result<f64> {
    let xs = base.sample_base(n, rng)?;
    let wb = transport_weights(f, target, base, &xs, grid)?;
    if wb.log_weights.is_empty() {
        return Ok(0.0);
    }
    Ok(weight_diagnostics(&wb).ess / n as f64)
}

pub struct Trainer {
    cfg: TrainConfig,
    problem: TrainProblem,
    field: VelocityField,
    step: u64,
    state: TrainerState,
    started: Instant,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, f0: VelocityField, problem: TrainProblem) -> Result<Self> {
        check_problem(&cfg, &f0, &problem)?;
        let mut state = TrainerState { buffer: ReplayBuffer::new(cfg.buffer_capacity), ..Default::default() };
        if cfg.source == DataSource::McmcLoop {
            if let Some(data) = &problem.data {
                state.buffer.extend(data.iter().cloned(), Provenance::External);
            }
        }
        Ok(Self { cfg, problem, field: f0, step: 0, state, started: Instant::now() })
    }

    pub fn from_checkpoint(ck: Checkpoint, problem: TrainProblem) -> Result<Self> {
        check_problem(&ck.config, &ck.field, &problem)?;
        Ok(Self { cfg: ck.config, problem, field: ck.field, step: ck.step, state: ck.state, started: Instant::now() })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint { field: self.field.clone(), config: self.cfg.clone(), step: self.step, state: self.state.clone() }
    }

    pub fn field(&self) -> &VelocityField {
        &self.field
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Completed iterations.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn state(&self) -> &TrainerState {
        &self.state
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.cfg.iterations
    }

    /// Runs until `min(until, iterations)` iterations are complete, passing each row to `sink`.
    pub fn run_until(&mut self, until: u64, mut sink: impl FnMut(&MetricsRow) -> Result<()>) -> Result<()> {
        let end = until.min(self.cfg.iterations);
        while self.step < end {
            let row = self.step_once()?;
            sink(&row)?;
        }
        Ok(())
    }

    pub fn run(&mut self, sink: impl FnMut(&MetricsRow) -> Result<()>) -> Result<()> {
        self.run_until(self.cfg.iterations, sink)
    }

    fn weighting_field(&self) -> Result<VelocityField> {
        match (self.cfg.weighting, &self.state.prev_params) {
            (Weighting::Previous, Some(p)) => self.field.with_params(p.clone()),
            _ => Ok(self.field.clone()),
        }
    }

    /// One iteration: acquire a batch, take its gradient, update the parameters.
    pub fn step_once(&mut self) -> Result<MetricsRow> {
        let k = self.step;
        let n = self.cfg.batch_size;
        let mut rng = stream(self.cfg.seed, &[k, 0]);
        let grid = TimeGrid::unit(self.cfg.n_steps_train)?;

        let mut acceptance = f64::NAN;
        let (target, base) = (&self.problem.target, &self.problem.base);
        let batch = match self.cfg.source {
            DataSource::FreshBase | DataSource::IsLoop => base.sample_base(n, &mut rng)?,
            DataSource::Dataset => {
                let data = self.problem.data.as_ref().expect("checked dataset");
                (0..n).map(|_| data[rng.random_range(0..data.len())].clone()).collect()
            }
            DataSource::ExactTarget => target.sample_mixture_exact(n, &mut rng)?,
            DataSource::McmcLoop => {
                let (xs, acc) = self.mcmc_batch(k)?;
                acceptance = acc;
                xs
            }
        };
        let cfg = &self.cfg;
        let (target, base) = (&self.problem.target, &self.problem.base);
        let f = &self.field;
        let f_w = self.weighting_field()?;
        let bg: BatchGrad = match (cfg.objective, cfg.source) {
            (ObjectiveKind::ReverseKl, _) => reverse_kl_batch(f, target, base, &batch, &grid)?,
            (ObjectiveKind::Chi2, _) => chi2_batch(f, target, base, &batch, &grid)?,
            (ObjectiveKind::ForwardKl, _) => forward_kl_batch(f, base, &batch, &grid)?,
            (ObjectiveKind::ForwardKlIs, _) => forward_kl_is_batch(f, &f_w, target, base, &batch, &grid)?,
            (ObjectiveKind::ScoreMatching, DataSource::IsLoop) => {
                let (tv, tg) = transport_of(cfg.objective, &f_w, &cfg.diffusion, cfg.n_steps_train)?;
                score_matching_is_batch(f, &tv, target, base, &batch, &tg, &cfg.diffusion, &mut rng)?
            }
            (ObjectiveKind::ScoreMatching, _) => score_matching_batch(f, &batch, &cfg.diffusion, &mut rng)?,
            (ObjectiveKind::Interpolant, DataSource::IsLoop) => {
                interpolant_is_batch(f, &f_w, target, base, &batch, &grid, &cfg.interpolant, &mut rng)?
            }
            (ObjectiveKind::Interpolant, _) => {
                let xb = base.sample_base(batch.len(), &mut rng)?;
                let pairs: Vec<(Vec<f64>, Vec<f64>)> = xb.into_iter().zip(batch).collect();
                interpolant_batch(f, &pairs, &cfg.interpolant, &mut rng)?
            }
        };
        let dropped = bg.diagnostics.get("n_dropped").copied().unwrap_or(0.0);
        if dropped > cfg.max_drop_fraction * n as f64 {
            return Err(Error::TooManyFailures { failed: dropped as usize, total: n });
        }
        if bg.loss_value.is_nan() {
            return Err(Error::NonFinite(format!("loss at iteration {k}")));
        }

        let h = cfg.lr.rate(k);
        let new_params = self.update(&bg.grad, h)?;
        let new_field = self.field.with_params(new_params)?;
        let old = std::mem::replace(&mut self.field, new_field);
        self.state.prev_params = Some(old.params().to_vec());
        self.step += 1;

        let cfg = &self.cfg;
        let (target, base) = (&self.problem.target, &self.problem.base);
        let mut ess_fraction = f64::NAN;
        let last = self.step == cfg.iterations;
        if last || (cfg.eval_every > 0 && self.step % cfg.eval_every == 0) {
            let (tv, tg) = transport_of(cfg.objective, &self.field, &cfg.diffusion, cfg.n_steps_eval)?;
            let mut er = stream(cfg.seed, &[k, 2]);
            ess_fraction = transport_ess_fraction(&tv, target, base, &tg, cfg.eval_samples, &mut er)?;
        }
        Ok(MetricsRow {
            iteration: k,
            loss: bg.loss_value,
            grad_norm: bg.grad.norm(),
            ess_fraction,
            acceptance_rate: acceptance,
            batch_ess_fraction: bg.diagnostics.get("ess_fraction").copied().unwrap_or(f64::NAN),
            n_dropped: dropped as u64,
            lr: h,
            wall_time: if cfg.log_wall_time { self.started.elapsed().as_secs_f64() } else { 0.0 },
        })
    }

    fn update(&mut self, grad: &ParamGrad, h: f64) -> Result<Vec<f64>> {
        let theta = self.field.params();
        let out: Vec<f64> = match self.cfg.optimizer {
            Optimizer::Sgd => theta.iter().zip(&grad.values).map(|(a, g)| a - h * g).collect(),
            Optimizer::Adam { beta1, beta2, eps } => {
                let np = theta.len();
                let st = self.state.adam.get_or_insert_with(|| AdamState { m: vec![0.0; np], v: vec![0.0; np], t: 0 });
                st.t += 1;
                let c1 = 1.0 - beta1.powi(st.t as i32);
                let c2 = 1.0 - beta2.powi(st.t as i32);
                theta
                    .iter()
                    .zip(&grad.values)
                    .zip(st.m.iter_mut().zip(st.v.iter_mut()))
                    .map(|((a, g), (m, v))| {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        a - h * (*m / c1) / ((*v / c2).sqrt() + eps)
                    })
                    .collect()
            }
        };
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("parameters after iteration {}", self.step)));
        }
        Ok(out)
    }

    /// Advances the chains under the current field and assembles a batch of
    /// chain states plus replay-buffer draws. Returns the batch and the
    /// acceptance rate of this iteration's steps.
    fn mcmc_batch(&mut self, k: u64) -> Result<(Vec<Vec<f64>>, f64)> {
        let cfg = &self.cfg;
        let (target, base) = (&self.problem.target, &self.problem.base);
        let n = cfg.batch_size;
        let (tv, tg) = transport_of(cfg.objective, &self.field, &cfg.diffusion, cfg.n_steps_train)?;
        let n_buf = if self.state.buffer.is_empty() { 0 } else { (cfg.buffer_mix * n as f64).round() as usize };
        let n_chain = n - n_buf.min(n);
        let mut rng = stream(cfg.seed, &[k, 1]);
        let from_buffer = self.state.buffer.sample(n_buf.min(n), &mut rng)?;

        if cfg.restart_chains || self.state.chains.len() != cfg.chains {
            self.state.chains = map_indexed(cfg.chains, |c| -> Result<ChainState> {
                let mut r = stream(cfg.seed, &[k, 3, c as u64]);
                let xb = base.sample_base(1, &mut r)?.pop().expect("one sample");
                let x = flow_forward(&tv, &xb, &tg).map(|(x1, _)| x1).unwrap_or(xb);
                Ok(ChainState::new(x))
            })
            .into_iter()
            .collect::<Result<_>>()?;
        }
        let per_chain = n_chain.div_ceil(cfg.chains);
        let tv = Arc::new(tv);
        let runs = map_indexed(cfg.chains, |c| -> Result<(ChainState, Vec<Vec<f64>>, usize)> {
            let mut r = stream(cfg.seed, &[k, 1, c as u64 + 1]);
            let mut s = self.state.chains[c].clone();
            let mut xs = Vec::with_capacity(per_chain);
            let mut acc = 0;
            for _ in 0..per_chain {
                let (next, out) = independence_mh_step(&s, &tv, target, base, &tg, &mut r)?;
                acc += out.accepted as usize;
                xs.push(next.position.clone());
                s = next;
            }
            Ok((s, xs, acc))
        });
        let mut chain_samples = Vec::with_capacity(per_chain * cfg.chains);
        let (mut acc, mut total) = (0usize, 0usize);
        for (c, r) in runs.into_iter().enumerate() {
            let (s, xs, a) = r?;
            self.state.chains[c] = s;
            acc += a;
            total += xs.len();
            chain_samples.extend(xs);
        }
        chain_samples.truncate(n_chain);
        self.state.buffer.extend(chain_samples.iter().cloned(), Provenance::Mcmc);
        let mut batch = chain_samples;
        batch.extend(from_buffer);
        let rate = if total == 0 { f64::NAN } else { acc as f64 / total as f64 };
        Ok((batch, rate))
    }
}

fn check_problem(cfg: &TrainConfig, f: &VelocityField, p: &TrainProblem) -> Result<()> {
    cfg.validate()?;
    let d = p.target.dim();
    if p.base.dim() != d || f.dim() != d {
        return Err(Error::Config(format!(
            "dimensions disagree: target {d}, base {}, field {}",
            p.base.dim(),
            f.dim()
        )));
    }
    if f.n_params() == 0 {
        return Err(Error::Config(format!("a {} field has no trainable parameters", f.kind_name())));
    }
    if !matches!(p.base.kind(), PotentialKind::StandardNormal) {
        return Err(Error::Config("training needs a standard normal base".into()));
    }
    match cfg.source {
        DataSource::Dataset => match &p.data {
            Some(xs) if !xs.is_empty() => {
                for x in xs {
                    if x.len() != d || x.iter().any(|v| !v.is_finite()) {
                        return Err(Error::Config("dataset samples must be finite and match the target dimension".into()));
                    }
                }
            }
            _ => return Err(Error::Config("the dataset source needs target samples".into())),
        },
        DataSource::ExactTarget if p.target.mixture().is_none() => {
            return Err(Error::Config("the exact_target source needs a Gaussian mixture target".into()));
        }
        _ => {}
    }
    Ok(())
}

/// Trains `f0` for `cfg.iterations` iterations and returns the field with its metrics.
pub fn train(cfg: TrainConfig, f0: VelocityField, problem: TrainProblem) -> Result<(VelocityField, Vec<MetricsRow>)> {
    let mut t = Trainer::new(cfg, f0, problem)?;
    let mut rows = Vec::new();
    t.run(|r| {
        rows.push(*r);
        Ok(())
    })?;
    Ok((t.field, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair() -> TrainProblem {
        TrainProblem {
            target: TargetModel::isotropic_gaussian(1, 4.0).unwrap(),
            base: TargetModel::standard_normal(1).unwrap(),
            data: None,
        }
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            batch_size: 16,
            iterations: 6,
            n_steps_train: 4,
            n_steps_eval: 4,
            eval_samples: 32,
            eval_every: 3,
            ..Default::default()
        }
    }

    #[test]
    fn sgd_step_examples() {
        let f = VelocityField::mlp(1, &[4], 1, 1.0).unwrap();
        let zero = ParamGrad::zeros(f.n_params());
        assert_eq!(sgd_step(&f, &zero, 0.3).unwrap(), f);
        let g = ParamGrad { values: vec![1.0; f.n_params()] };
        assert_eq!(sgd_step(&f, &g, 0.0).unwrap(), f);
        // |theta|^2 / 2 has gradient theta
        let mut a = VelocityField::affine(1, &[3.0], &[-4.0]).unwrap();
        for _ in 0..100 {
            let g = ParamGrad { values: a.params().to_vec() };
            a = sgd_step(&a, &g, 0.1).unwrap();
        }
        let norm = a.params().iter().map(|v| v * v).sum::<f64>().sqrt();
        let want = 5.0 * 0.9f64.powi(100);
        assert!((norm - want).abs() / want < 1e-10);
    }

    #[test]
    fn schedules() {
        let rm = LrSchedule::RobbinsMonro { h0: 0.1, k0: 100.0, power: 1.0 };
        assert_eq!(rm.rate(0), 0.1);
        assert!((rm.rate(100) - 0.05).abs() < 1e-15);
        assert!(rm.satisfies_robbins_monro());
        assert!(!LrSchedule::RobbinsMonro { h0: 0.1, k0: 1.0, power: 0.5 }.satisfies_robbins_monro());
        assert!(!LrSchedule::Constant { h: 0.1 }.satisfies_robbins_monro());
        assert!(LrSchedule::Constant { h: 0.0 }.validate().is_err());
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig { objective: ObjectiveKind::ReverseKl, source: DataSource::Dataset, ..Default::default() };
        assert!(bad.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        let f = VelocityField::mlp(1, &[4], 1, 1.0).unwrap();
        let ds = TrainConfig { objective: ObjectiveKind::ForwardKl, source: DataSource::Dataset, ..small_cfg() };
        assert!(Trainer::new(ds, f.clone(), pair()).is_err());
        let toml_cfg: TrainConfig = toml::from_str("objective = \"chi2\"\nlr = { kind = \"robbins_monro\", h0 = 0.1, k0 = 50 }\n").unwrap();
        assert_eq!(toml_cfg.lr, LrSchedule::RobbinsMonro { h0: 0.1, k0: 50.0, power: 1.0 });
        assert!(toml::from_str::<TrainConfig>("bogus = 1").is_err());
        let mix = VelocityField::mixture_score(crate::targets::GaussianMixture::isotropic(1, vec![1.0], vec![vec![0.0]], &[1.0]).unwrap());
        assert!(Trainer::new(small_cfg(), mix, pair()).is_err());
    }

    #[test]
    fn zero_iterations_return_initial_field() {
        let f = VelocityField::mlp(1, &[4], 1, 1.0).unwrap();
        let (g, rows) = train(TrainConfig { iterations: 0, ..small_cfg() }, f.clone(), pair()).unwrap();
        assert_eq!(g, f);
        assert!(rows.is_empty());
    }

    #[test]
    fn every_source_runs() {
        let mix = crate::targets::GaussianMixture::isotropic(1, vec![0.5, 0.5], vec![vec![-1.0], vec![1.0]], &[0.5, 0.5]).unwrap();
        let target = TargetModel::gaussian_mixture(mix, 0.0).unwrap();
        let mut rng = stream(1, &[]);
        let data = target.sample_mixture_exact(50, &mut rng).unwrap();
        let problem = TrainProblem { target, base: TargetModel::standard_normal(1).unwrap(), data: Some(data) };
        for (obj, srcs) in [
            (ObjectiveKind::ReverseKl, vec![DataSource::FreshBase]),
            (ObjectiveKind::Chi2, vec![DataSource::FreshBase]),
            (ObjectiveKind::ForwardKl, vec![DataSource::Dataset, DataSource::ExactTarget, DataSource::McmcLoop]),
            (ObjectiveKind::ForwardKlIs, vec![DataSource::IsLoop]),
            (ObjectiveKind::ScoreMatching, vec![DataSource::Dataset, DataSource::IsLoop, DataSource::McmcLoop]),
            (ObjectiveKind::Interpolant, vec![DataSource::ExactTarget, DataSource::IsLoop, DataSource::McmcLoop]),
        ] {
            for src in srcs {
                let cfg = TrainConfig { objective: obj, source: src, buffer_mix: 0.25, chains: 2, ..small_cfg() };
                let f = VelocityField::mlp(1, &[4], 2, 0.1).unwrap();
                let (g, rows) = train(cfg, f.clone(), problem.clone()).unwrap_or_else(|e| panic!("{obj:?} {src:?}: {e}"));
                assert_eq!(rows.len(), 6);
                assert_ne!(g, f);
                assert!(rows.iter().all(|r| r.loss.is_finite() && r.grad_norm.is_finite()));
                assert!(rows[2].ess_fraction.is_finite() && rows[1].ess_fraction.is_nan());
                assert_eq!(src == DataSource::McmcLoop, rows[0].acceptance_rate.is_finite());
            }
        }
    }

    #[test]
    fn mcmc_loop_uses_buffer_and_keeps_chains() {
        let cfg = TrainConfig {
            objective: ObjectiveKind::ForwardKl,
            source: DataSource::McmcLoop,
            buffer_capacity: 40,
            buffer_mix: 0.5,
            chains: 3,
            ..small_cfg()
        };
        let mut problem = pair();
        problem.data = Some(vec![vec![0.1], vec![-0.2]]);
        let mut t = Trainer::new(cfg, VelocityField::mlp(1, &[4], 3, 0.1).unwrap(), problem).unwrap();
        assert_eq!(t.state().buffer.count(Provenance::External), 2);
        t.step_once().unwrap();
        let steps: Vec<u64> = t.state().chains.iter().map(|c| c.step_index).collect();
        assert_eq!(steps, vec![3, 3, 3]);
        t.step_once().unwrap();
        assert!(t.state().chains.iter().all(|c| c.step_index == 6));
        assert!(t.state().buffer.len() <= 40);
        assert!(t.state().buffer.count(Provenance::Mcmc) > 0);
    }

    #[test]
    fn adam_runs_and_is_stateful() {
        let cfg = TrainConfig { optimizer: Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }, ..small_cfg() };
        let mut t = Trainer::new(cfg, VelocityField::mlp(1, &[4], 4, 0.1).unwrap(), pair()).unwrap();
        t.run(|_| Ok(())).unwrap();
        assert_eq!(t.state().adam.as_ref().unwrap().t, 6);
    }

    #[test]
    fn checkpoint_bytes_round_trip_and_resume() {
        let cfg = TrainConfig { iterations: 8, ..small_cfg() };
        let f0 = VelocityField::mlp(1, &[5], 5, 0.1).unwrap();
        let (_, full) = train(cfg.clone(), f0.clone(), pair()).unwrap();

        let mut a = Trainer::new(cfg, f0, pair()).unwrap();
        let mut rows = Vec::new();
        a.run_until(4, |r| {
            rows.push(*r);
            Ok(())
        })
        .unwrap();
        let bytes = a.checkpoint().to_bytes().unwrap();
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(ck.to_bytes().unwrap(), bytes);
        let mut b = Trainer::from_checkpoint(ck, pair()).unwrap();
        b.run(|r| {
            rows.push(*r);
            Ok(())
        })
        .unwrap();
        let text = |rs: &[MetricsRow]| rs.iter().map(|r| r.fields().join(",")).collect::<Vec<_>>();
        assert_eq!(text(&rows), text(&full));
    }

    #[test]
    fn checkpoint_rejects_bad_files() {
        let cfg = small_cfg();
        let f = VelocityField::mlp(1, &[5], 5, 0.1).unwrap();
        let ck = Checkpoint { field: f.clone(), config: cfg, step: 3, state: TrainerState::default() };
        let bytes = ck.to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&wrong), Err(Error::Format(_))));
        let mut ver = bytes.clone();
        ver[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&ver), Err(Error::Format(_))));

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.bin");
        checkpoint_save(&f, &ck.config, 3, &p).unwrap();
        let (g, _, step) = checkpoint_load(&p).unwrap();
        assert_eq!((g.params(), step), (f.params(), 3));
        let other = VelocityField::mlp(1, &[6], 5, 0.1).unwrap().descriptor().unwrap();
        assert!(matches!(Checkpoint::load_expecting(&p, &other), Err(Error::Format(_))));
    }
}
