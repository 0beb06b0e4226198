//! Run configuration: one TOML file describes a whole experiment.
//!
//! ```toml
//! seed = 7
//! output_dir = "runs/gauss"
//!
//! [target]
//! kind = "isotropic_gaussian"
//! dim = 1
//! alpha = 4.0
//!
//! [field]
//! kind = "mlp"
//! hidden = [32, 32]
//!
//! [objective]
//! kind = "reverse_kl"
//!
//! [trainer]
//! batch_size = 256
//! iterations = 1000
//! lr = { kind = "constant", h = 0.01 }
//! ```
//!
//! Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{VelocityField, DEFAULT_HIDDEN, DEFAULT_INIT_SCALE};
use crate::importance::Observable;
use crate::objectives::ObjectiveKind;
use crate::simfree::{DiffusionConfig, InterpolantSchedule};
use crate::targets::{GaussianMixture, TargetModel};
use crate::trainer::{
    config_hash, DataSource, LrSchedule, Optimizer, TrainConfig, TrainProblem, Weighting,
};

/// Environment variable naming the default output directory.
pub const OUTPUT_DIR_ENV: &str = "FLOWMC_OUTPUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetSpec {
    StandardNormal {
        dim: usize,
        #[serde(default)]
        offset: f64,
    },
    IsotropicGaussian {
        dim: usize,
        alpha: f64,
    },
    GaussianMixture {
        dim: usize,
        probs: Vec<f64>,
        means: Vec<Vec<f64>>,
        /// Row-major covariance per mode.
        #[serde(default)]
        covs: Option<Vec<Vec<f64>>>,
        /// Isotropic variance per mode, instead of `covs`.
        #[serde(default)]
        variances: Option<Vec<f64>>,
        #[serde(default)]
        offset: f64,
    },
    DoubleWell {
        dim: usize,
        a: f64,
        #[serde(default)]
        offset: f64,
    },
}

impl TargetSpec {
    pub fn build(&self) -> Result<TargetModel> {
        match self {
            TargetSpec::StandardNormal { dim, offset } => TargetModel::standard_normal_with_offset(*dim, *offset),
            TargetSpec::IsotropicGaussian { dim, alpha } => TargetModel::isotropic_gaussian(*dim, *alpha),
            TargetSpec::GaussianMixture { dim, probs, means, covs, variances, offset } => {
                let mix = match (covs, variances) {
                    (Some(c), None) => GaussianMixture::new(*dim, probs.clone(), means.clone(), c.clone())?,
                    (None, Some(v)) => GaussianMixture::isotropic(*dim, probs.clone(), means.clone(), v)?,
                    _ => {
                        return Err(Error::Config(
                            "[target] gaussian_mixture needs exactly one of `covs` or `variances`".into(),
                        ))
                    }
                };
                TargetModel::gaussian_mixture(mix, *offset)
            }
            TargetSpec::DoubleWell { dim, a, offset } => TargetModel::double_well_with_offset(*dim, *a, *offset),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum BaseSpec {
    #[default]
    StandardNormal,
}

fn default_hidden() -> Vec<usize> {
    DEFAULT_HIDDEN.to_vec()
}

fn default_scale() -> f64 {
    DEFAULT_INIT_SCALE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FieldSpec {
    Mlp {
        #[serde(default = "default_hidden")]
        hidden: Vec<usize>,
        #[serde(default = "default_scale")]
        init_scale: f64,
        /// Defaults to the run seed.
        #[serde(default)]
        init_seed: Option<u64>,
    },
    /// `v = A x + b` with `A` row-major.
    Affine { a: Vec<f64>, b: Vec<f64> },
    /// `v = c x`.
    ScalarLinear { c: f64 },
    Zero,
    /// The target's exact OU score (mixture targets only).
    MixtureScore,
}

impl Default for FieldSpec {
    fn default() -> Self {
        FieldSpec::Mlp { hidden: default_hidden(), init_scale: default_scale(), init_seed: None }
    }
}

impl FieldSpec {
    pub fn build(&self, target: &TargetModel, seed: u64) -> Result<VelocityField> {
        let d = target.dim();
        match self {
            FieldSpec::Mlp { hidden, init_scale, init_seed } => {
                VelocityField::mlp(d, hidden, init_seed.unwrap_or(seed), *init_scale)
            }
            FieldSpec::Affine { a, b } => VelocityField::affine(d, a, b),
            FieldSpec::ScalarLinear { c } => VelocityField::scalar_linear(d, *c),
            FieldSpec::Zero => VelocityField::zero(d),
            FieldSpec::MixtureScore => {
                let m = target
                    .mixture()
                    .ok_or_else(|| Error::Config("[field] mixture_score needs a gaussian_mixture target".into()))?;
                Ok(VelocityField::mixture_score(m.clone()))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSpec {
    pub kind: ObjectiveKind,
    #[serde(default)]
    pub schedule: InterpolantSchedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerSpec {
    pub batch_size: usize,
    pub iterations: u64,
    pub lr: LrSchedule,
    pub source: DataSource,
    /// CSV of target samples (columns `x0`, `x1`, ...) for the dataset source.
    pub dataset: Option<PathBuf>,
    pub buffer_capacity: usize,
    pub buffer_mix: f64,
    pub eval_every: u64,
    pub eval_samples: usize,
    pub n_steps_train: usize,
    pub n_steps_eval: usize,
    pub weighting: Weighting,
    pub chains: usize,
    pub restart_chains: bool,
    pub optimizer: Optimizer,
    pub log_wall_time: bool,
    pub max_drop_fraction: f64,
    /// Write an intermediate checkpoint every this many iterations (0: final only).
    pub checkpoint_every: u64,
}

impl Default for TrainerSpec {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            batch_size: t.batch_size,
            iterations: t.iterations,
            lr: t.lr,
            source: t.source,
            dataset: None,
            buffer_capacity: t.buffer_capacity,
            buffer_mix: t.buffer_mix,
            eval_every: t.eval_every,
            eval_samples: t.eval_samples,
            n_steps_train: t.n_steps_train,
            n_steps_eval: t.n_steps_eval,
            weighting: t.weighting,
            chains: t.chains,
            restart_chains: t.restart_chains,
            optimizer: t.optimizer,
            log_wall_time: t.log_wall_time,
            max_drop_fraction: t.max_drop_fraction,
            checkpoint_every: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    /// Self-normalized importance sampling with transported base draws.
    TransportIs,
    IndependenceMh,
    RandomWalk,
    /// `rw_steps` random-walk steps, then one independence step.
    Mixed,
    ReverseSde,
    ProbabilityFlow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSpec {
    pub kind: SamplerKind,
    pub n_samples: usize,
    /// RK4 steps for transport.
    pub n_steps: usize,
    pub burn_in: usize,
    pub chains: usize,
    pub step_size: f64,
    pub rw_steps: usize,
    /// Initial chain position; defaults to the transport image of a base draw
    /// (or the origin for the random walk).
    pub init: Option<Vec<f64>>,
    pub observables: Vec<Observable>,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        Self {
            kind: SamplerKind::TransportIs,
            n_samples: 10_000,
            n_steps: 64,
            burn_in: 0,
            chains: 1,
            step_size: 0.5,
            rw_steps: 4,
            init: None,
            observables: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    /// Worker threads (0: all cores). Does not affect results.
    #[serde(default)]
    pub workers: usize,
    #[serde(default)]
    pub target: Option<TargetSpec>,
    #[serde(default)]
    pub base: BaseSpec,
    #[serde(default)]
    pub field: FieldSpec,
    #[serde(default)]
    pub objective: Option<ObjectiveSpec>,
    #[serde(default)]
    pub trainer: TrainerSpec,
    #[serde(default)]
    pub diffusion: DiffusionConfig,
    #[serde(default)]
    pub sampler: SamplerSpec,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Structural checks that need no computation.
    pub fn validate(&self) -> Result<()> {
        let target = self.target()?;
        let d = target.dim();
        match &self.field {
            FieldSpec::Affine { a, b } if a.len() != d * d || b.len() != d => {
                return Err(Error::Config(format!("[field] affine needs {} entries in `a` and {d} in `b`", d * d)));
            }
            FieldSpec::MixtureScore if target.mixture().is_none() => {
                return Err(Error::Config("[field] mixture_score needs a gaussian_mixture target".into()));
            }
            _ => {}
        }
        self.diffusion.validate().map_err(|e| Error::Config(format!("[diffusion] {e}")))?;
        let s = &self.sampler;
        if s.n_steps == 0 || s.chains == 0 {
            return Err(Error::Config("[sampler] n_steps and chains must be >= 1".into()));
        }
        if s.burn_in > s.n_samples && matches!(s.kind, SamplerKind::IndependenceMh | SamplerKind::RandomWalk | SamplerKind::Mixed) {
            return Err(Error::Config("[sampler] burn_in exceeds n_samples".into()));
        }
        if let Some(x) = &s.init {
            if x.len() != d {
                return Err(Error::Config(format!("[sampler] init has {} coordinates, target has {d}", x.len())));
            }
        }
        for o in &s.observables {
            o.check(d).map_err(|e| Error::Config(format!("[sampler] {e}")))?;
        }
        if self.objective.is_some() {
            self.train_config()?.validate()?;
        }
        Ok(())
    }

    pub fn target(&self) -> Result<TargetModel> {
        self.target
            .as_ref()
            .ok_or_else(|| Error::Config("missing [target] block".into()))?
            .build()
            .map_err(|e| Error::Config(format!("[target] {e}")))
    }

    pub fn base(&self) -> Result<TargetModel> {
        match self.base {
            BaseSpec::StandardNormal => TargetModel::standard_normal(self.target()?.dim()),
        }
    }

    pub fn objective(&self) -> Result<ObjectiveSpec> {
        self.objective.ok_or_else(|| Error::Config("missing [objective] block".into()))
    }

    pub fn initial_field(&self) -> Result<VelocityField> {
        self.field.build(&self.target()?, self.seed)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let o = self.objective()?;
        let t = &self.trainer;
        Ok(TrainConfig {
            objective: o.kind,
            batch_size: t.batch_size,
            iterations: t.iterations,
            lr: t.lr,
            seed: self.seed,
            source: t.source,
            buffer_capacity: t.buffer_capacity,
            buffer_mix: t.buffer_mix,
            eval_every: t.eval_every,
            eval_samples: t.eval_samples,
            n_steps_train: t.n_steps_train,
            n_steps_eval: t.n_steps_eval,
            weighting: t.weighting,
            chains: t.chains,
            restart_chains: t.restart_chains,
            optimizer: t.optimizer,
            log_wall_time: t.log_wall_time,
            max_drop_fraction: t.max_drop_fraction,
            diffusion: self.diffusion,
            interpolant: o.schedule,
        })
    }

    /// Target, base, and (when configured) the dataset; relative dataset
    /// paths resolve against `config_dir`.
    pub fn problem(&self, config_dir: &Path) -> Result<TrainProblem> {
        let data = match &self.trainer.dataset {
            Some(p) => Some(read_points(&config_dir.join(p))?),
            None => None,
        };
        Ok(TrainProblem { target: self.target()?, base: self.base()?, data })
    }

    /// Hash of the settings that determine results (output location and
    /// worker count excluded).
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.output_dir = None;
        c.workers = 0;
        config_hash(&c)
    }

    /// Flag, then config, then the environment, then the working directory.
    pub fn resolve_output_dir(&self, flag: Option<&Path>) -> PathBuf {
        if let Some(p) = flag {
            return p.to_path_buf();
        }
        if let Some(p) = &self.output_dir {
            return p.clone();
        }
        match std::env::var_os(OUTPUT_DIR_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => PathBuf::from("."),
        }
    }
}

/// Reads points from a CSV whose coordinate columns are named `x0`, `x1`, ...;
/// lines starting with `#` are skipped.
pub fn read_points(path: &Path) -> Result<Vec<Vec<f64>>> {
    let table = read_table(path)?;
    let cols = coordinate_columns(&table.header);
    if cols.is_empty() {
        return Err(Error::Config(format!("{}: no coordinate columns x0, x1, ...", path.display())));
    }
    table
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| cols.iter().map(|&c| parse_cell(path, i, &r[c])).collect())
        .collect()
}

pub(crate) struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

pub(crate) fn read_table(path: &Path) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        rows.push(rec.iter().map(str::to_string).collect());
    }
    if header.is_empty() || rows.is_empty() {
        return Err(Error::Config(format!("{}: file has no data rows", path.display())));
    }
    Ok(Table { header, rows })
}

pub(crate) fn coordinate_columns(header: &[String]) -> Vec<usize> {
    let mut cols: Vec<(usize, usize)> = header
        .iter()
        .enumerate()
        .filter_map(|(i, h)| h.strip_prefix('x').and_then(|n| n.parse::<usize>().ok()).map(|k| (k, i)))
        .collect();
    cols.sort();
    cols.into_iter().map(|(_, i)| i).collect()
}

pub(crate) fn parse_cell(path: &Path, row: usize, s: &str) -> Result<f64> {
    s.parse::<f64>()
        .map_err(|_| Error::Config(format!("{}: data row {}: cannot parse {s:?} as a number", path.display(), row + 1)))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 3
[target]
kind = "isotropic_gaussian"
dim = 1
alpha = 4.0
[field]
kind = "mlp"
hidden = [8]
[objective]
kind = "reverse_kl"
[trainer]
iterations = 5
"#;

    #[test]
    fn parses_minimal_config() {
        let c = RunConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(c.seed, 3);
        let t = c.train_config().unwrap();
        assert_eq!((t.iterations, t.seed, t.batch_size), (5, 3, 256));
        assert_eq!(c.initial_field().unwrap().n_params(), 8 * 2 + 8 + 8 + 1);
        assert_eq!(c.hash().unwrap().len(), 16);
    }

    #[test]
    fn rejects_unknown_keys_and_missing_blocks() {
        let e = RunConfig::from_toml(&format!("{MINIMAL}\nbogus = 1")).unwrap_err();
        assert!(e.to_string().contains("bogus"), "{e}");
        let e = RunConfig::from_toml(&MINIMAL.replace("hidden = [8]", "hidden = [8]\nwidth = 3")).unwrap_err();
        assert!(e.to_string().contains("width"), "{e}");
        let no_target = MINIMAL.replace("[target]\nkind = \"isotropic_gaussian\"\ndim = 1\nalpha = 4.0\n", "");
        let e = RunConfig::from_toml(&no_target).unwrap_err();
        assert!(e.to_string().contains("[target]"), "{e}");
        let e = RunConfig::from_toml("seed = \"x\"").unwrap_err();
        assert!(e.to_string().contains("line 1"), "{e}");
    }

    #[test]
    fn hash_ignores_workers_and_output() {
        let a = RunConfig::from_toml(MINIMAL).unwrap();
        let mut b = a.clone();
        b.workers = 4;
        b.output_dir = Some("elsewhere".into());
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.seed = 4;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }

    #[test]
    fn mixture_and_sampler_blocks() {
        let text = r#"
[target]
kind = "gaussian_mixture"
dim = 1
probs = [0.5, 0.5]
means = [[-2.0], [2.0]]
variances = [0.25, 0.25]
[field]
kind = "mixture_score"
[sampler]
kind = "reverse_sde"
n_samples = 10
observables = [{ kind = "indicator_halfspace", coord = 0, threshold = 0.0 }]
"#;
        let c = RunConfig::from_toml(text).unwrap();
        assert_eq!(c.initial_field().unwrap().kind_name(), "mixture_score");
        assert!(c.objective().is_err());
        let bad = text.replace("variances = [0.25, 0.25]", "");
        assert!(RunConfig::from_toml(&bad).is_err());
    }

    #[test]
    fn reads_point_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        std::fs::write(&p, "# note\nx1,x0,w\n2,1,9\n4,3,9\n").unwrap();
        assert_eq!(read_points(&p).unwrap(), vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        std::fs::write(&p, "x0\n").unwrap();
        assert!(read_points(&p).is_err());
    }
}
