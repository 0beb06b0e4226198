//! `flowmc` command line: `train`, `sample`, `estimate` and `diagnose`.
//!
//! Exit status is 0 on success, 2 for configuration or usage errors, 3 for
//! numerical failures and 1 for I/O failures.

use std::ffi::OsString;
use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use crate::config::{coordinate_columns, parse_cell, read_table, RunConfig, SamplerKind};
use crate::error::{Error, Result};
use crate::field::VelocityField;
use crate::flow::flow_forward;
use crate::importance::{
    self_normalized_estimate, transport_weights, weight_diagnostics, z_ratio_estimate, Observable, WeightedBatch,
};
use crate::mcmc::{chain_diagnostics, pool_stats, ChainRun, ChainState, ChainStats, Kernel};
use crate::objectives::ObjectiveKind;
use crate::rng::{derive_seed, stream};
use crate::simfree::{probability_flow_sample, reverse_sde_sample};
use crate::targets::TargetModel;
use crate::trainer::metrics::{fmt, header_line};
use crate::trainer::{transport_of, Checkpoint, MetricsWriter, Trainer};
use crate::with_workers;

#[derive(Debug, Parser)]
#[command(name = "flowmc", version, about = "Learned transport maps for importance sampling and MCMC")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a field; writes metrics.csv and checkpoint.bin.
    Train(RunArgs),
    /// Draw samples with the configured sampler.
    Sample(ModelArgs),
    /// Importance-sampling estimates, Z-ratio and weight diagnostics.
    Estimate(ModelArgs),
    /// Recompute IACT, ESS and moments from sample or trace files.
    Diagnose(DiagnoseArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Run configuration (TOML).
    #[arg(short, long)]
    pub config: PathBuf,
    /// Output directory; overrides the config and FLOWMC_OUTPUT_DIR.
    #[arg(short, long)]
    pub output_dir: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads (0: all cores).
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Trained checkpoint; without it the [field] block is used as is.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Number of samples; overrides [sampler] n_samples.
    #[arg(short, long)]
    pub n: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    /// CSV files with coordinate columns x0, x1, ... and optional `chain`
    /// and `accepted` columns.
    #[arg(required = true)]
    pub files: Vec<PathBuf>,
    /// Where to write `<stem>_diagnostics.csv` (default: beside each input).
    #[arg(short, long)]
    pub output_dir: Option<PathBuf>,
}

/// Parses `args` (program name first), runs the command and returns the exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli.command) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        3
    } else if matches!(e, Error::Io(_)) {
        1
    } else {
        2
    }
}

/// Runs a command and returns the files it wrote.
pub fn execute(cmd: &Command) -> Result<Vec<PathBuf>> {
    match cmd {
        Command::Train(a) => cmd_train(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Estimate(a) => cmd_estimate(a),
        Command::Diagnose(a) => cmd_diagnose(a),
    }
}

struct Prepared {
    cfg: RunConfig,
    config_dir: PathBuf,
    out: PathBuf,
    header: String,
}

fn prepare(a: &RunArgs) -> Result<Prepared> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(w) = a.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    let out = cfg.resolve_output_dir(a.output_dir.as_deref());
    std::fs::create_dir_all(&out)?;
    let header = header_line(&cfg.hash()?, cfg.seed);
    let config_dir = a.config.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok(Prepared { cfg, config_dir, out, header })
}

pub fn cmd_train(a: &RunArgs) -> Result<Vec<PathBuf>> {
    let p = prepare(a)?;
    let train_cfg = p.cfg.train_config()?;
    let problem = p.cfg.problem(&p.config_dir)?;
    let f0 = p.cfg.initial_field()?;
    let metrics_path = p.out.join("metrics.csv");
    let ck_path = p.out.join("checkpoint.bin");
    let every = p.cfg.trainer.checkpoint_every;
    let hash = p.cfg.hash()?;
    let seed = p.cfg.seed;
    let out = p.out.clone();
    let mut written = with_workers(p.cfg.workers, move || -> Result<Vec<PathBuf>> {
        let mut trainer = Trainer::new(train_cfg, f0, problem)?;
        let mut w = MetricsWriter::create(&metrics_path, &hash, seed)?;
        let mut written = vec![metrics_path.clone()];
        while !trainer.is_done() {
            let until = if every == 0 { u64::MAX } else { trainer.step() + every };
            trainer.run_until(until, |row| w.write(row))?;
            w.flush()?;
            if every > 0 && !trainer.is_done() {
                let path = out.join(format!("checkpoint_{:06}.bin", trainer.step()));
                trainer.checkpoint().save(&path)?;
                written.push(path);
            }
        }
        trainer.checkpoint().save(&ck_path)?;
        written.push(ck_path);
        Ok(written)
    })??;
    written.sort();
    Ok(written)
}

/// The field to use and the objective it was trained for (`None` for an
/// untrained velocity field).
fn load_model(p: &Prepared, checkpoint: Option<&Path>) -> Result<(VelocityField, Option<ObjectiveKind>)> {
    let d = p.cfg.target()?.dim();
    let (f, obj) = match checkpoint {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            (ck.field, Some(ck.config.objective))
        }
        None => {
            let obj = match p.cfg.field {
                crate::config::FieldSpec::MixtureScore => Some(ObjectiveKind::ScoreMatching),
                _ => p.cfg.objective.map(|o| o.kind),
            };
            (p.cfg.initial_field()?, obj)
        }
    };
    if f.dim() != d {
        return Err(Error::Config(format!("field has dimension {}, target has {d}", f.dim())));
    }
    Ok((f, obj))
}

fn sample_count(p: &Prepared, n: Option<usize>) -> Result<usize> {
    let n = n.unwrap_or(p.cfg.sampler.n_samples);
    if n == 0 {
        return Err(Error::Config("number of samples must be >= 1".into()));
    }
    Ok(n)
}

fn observables(p: &Prepared, d: usize, with_one: bool) -> Vec<Observable> {
    if !p.cfg.sampler.observables.is_empty() {
        return p.cfg.sampler.observables.clone();
    }
    let mut obs = if with_one { vec![Observable::One] } else { Vec::new() };
    obs.extend((0..d).map(|coord| Observable::MeanCoordinate { coord }));
    obs
}

// stream addresses under the run seed
const IS_STREAM: u64 = 1;
const CHAIN_STREAM: u64 = 2;
const INIT_STREAM: u64 = 3;
const DIFFUSION_STREAM: u64 = 4;

fn weighted_batch(
    p: &Prepared,
    f: &VelocityField,
    obj: Option<ObjectiveKind>,
    target: &TargetModel,
    base: &TargetModel,
    n: usize,
) -> Result<WeightedBatch> {
    let (v, grid) = transport_of(obj.unwrap_or(ObjectiveKind::ReverseKl), f, &p.cfg.diffusion, p.cfg.sampler.n_steps)?;
    let xs = base.sample_base(n, &mut stream(p.cfg.seed, &[IS_STREAM]))?;
    transport_weights(&v, target, base, &xs, &grid)
}

pub fn cmd_estimate(a: &ModelArgs) -> Result<Vec<PathBuf>> {
    let p = prepare(&a.run)?;
    let n = sample_count(&p, a.n)?;
    let (f, obj) = load_model(&p, a.checkpoint.as_deref())?;
    let target = p.cfg.target()?;
    let base = p.cfg.base()?;
    let obs = observables(&p, target.dim(), true);
    let wb = with_workers(p.cfg.workers, || weighted_batch(&p, &f, obj, &target, &base, n))??;
    let mut rows: Vec<(String, f64, f64)> = obs
        .iter()
        .map(|o| {
            let e = self_normalized_estimate(&wb, o);
            (o.name(), e.value, e.std_error)
        })
        .collect();
    let z = z_ratio_estimate(&wb);
    let d = weight_diagnostics(&wb);
    rows.extend([
        ("z_ratio".to_string(), z.value, z.std_error),
        ("log_z_ratio".to_string(), z.log_value, f64::NAN),
        ("ess".to_string(), d.ess, f64::NAN),
        ("ess_fraction".to_string(), d.ess_fraction, f64::NAN),
        ("second_moment_ratio".to_string(), d.second_moment_ratio, d.second_moment_ratio_se),
        ("max_weight_fraction".to_string(), d.max_weight_fraction, f64::NAN),
        ("n".to_string(), n as f64, f64::NAN),
        ("n_failed".to_string(), wb.n_failed as f64, f64::NAN),
    ]);
    let path = p.out.join("estimates.csv");
    let mut w = CsvOut::create(&path, &p.header, &["quantity", "value", "std_error"])?;
    for (q, v, se) in rows {
        w.row([q, fmt(v), fmt(se)])?;
    }
    w.finish()?;
    Ok(vec![path])
}

pub fn cmd_sample(a: &ModelArgs) -> Result<Vec<PathBuf>> {
    let p = prepare(&a.run)?;
    let n = sample_count(&p, a.n)?;
    let (f, obj) = load_model(&p, a.checkpoint.as_deref())?;
    let target = p.cfg.target()?;
    let base = p.cfg.base()?;
    let d = target.dim();
    let obs = observables(&p, d, false);
    let coords: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    let s = &p.cfg.sampler;
    let samples_path = p.out.join("samples.csv");
    let diag_path = p.out.join("diagnostics.csv");
    match s.kind {
        SamplerKind::TransportIs => {
            let wb = with_workers(p.cfg.workers, || weighted_batch(&p, &f, obj, &target, &base, n))??;
            let mut cols = coords.clone();
            cols.extend(["log_weight".to_string(), "weight".to_string()]);
            let mut w = CsvOut::create(&samples_path, &p.header, &cols)?;
            for ((x, lw), nw) in wb.endpoints.iter().zip(&wb.log_weights).zip(&wb.norm_weights) {
                let mut r: Vec<String> = x.iter().map(|v| fmt(*v)).collect();
                r.extend([fmt(*lw), fmt(*nw)]);
                w.row(r)?;
            }
            w.finish()?;
            let dg = weight_diagnostics(&wb);
            let mut w = CsvOut::create(&diag_path, &p.header, &["quantity", "value", "std_error"])?;
            for o in &obs {
                let e = self_normalized_estimate(&wb, o);
                w.row([o.name(), fmt(e.value), fmt(e.std_error)])?;
            }
            for (k, v) in dg.to_map() {
                w.row([k, fmt(v), fmt(f64::NAN)])?;
            }
            w.row(["n_failed".to_string(), wb.n_failed.to_string(), fmt(f64::NAN)])?;
            w.finish()?;
            Ok(vec![diag_path, samples_path])
        }
        SamplerKind::ReverseSde | SamplerKind::ProbabilityFlow => {
            if obj != Some(ObjectiveKind::ScoreMatching) {
                return Err(Error::Config(
                    "[sampler] reverse_sde and probability_flow need a score field (mixture_score or a score_matching checkpoint)".into(),
                ));
            }
            let mut rng = stream(p.cfg.seed, &[DIFFUSION_STREAM]);
            let xs = with_workers(p.cfg.workers, || {
                if s.kind == SamplerKind::ReverseSde {
                    reverse_sde_sample(&f, &p.cfg.diffusion, n, &mut rng)
                } else {
                    probability_flow_sample(&f, &p.cfg.diffusion, n, s.n_steps, &mut rng)
                }
            })??;
            let mut w = CsvOut::create(&samples_path, &p.header, &coords)?;
            for x in &xs {
                w.row(x.iter().map(|v| fmt(*v)))?;
            }
            w.finish()?;
            let stats = chain_diagnostics(&xs, &obs)?;
            write_chain_table(&diag_path, &p.header, &[("0".to_string(), stats.clone())], Some(&stats), f64::NAN)?;
            Ok(vec![diag_path, samples_path])
        }
        SamplerKind::IndependenceMh | SamplerKind::RandomWalk | SamplerKind::Mixed => {
            let (v, grid) =
                transport_of(obj.unwrap_or(ObjectiveKind::ReverseKl), &f, &p.cfg.diffusion, s.n_steps)?;
            let kernel = match s.kind {
                SamplerKind::RandomWalk => Kernel::RandomWalk { step_size: s.step_size },
                SamplerKind::IndependenceMh => Kernel::Independence { field: Arc::new(v.clone()), grid: grid.clone() },
                _ => Kernel::Mixed {
                    step_size: s.step_size,
                    rw_steps: s.rw_steps,
                    field: Arc::new(v.clone()),
                    grid: grid.clone(),
                },
            };
            let runs = with_workers(p.cfg.workers, || -> Result<Vec<ChainRun>> {
                let inits = (0..s.chains)
                    .map(|c| -> Result<ChainState> {
                        if let Some(x) = &s.init {
                            return Ok(ChainState::new(x.clone()));
                        }
                        let x = base.sample_base(1, &mut stream(p.cfg.seed, &[INIT_STREAM, c as u64]))?.remove(0);
                        if s.kind == SamplerKind::RandomWalk {
                            return Ok(ChainState::new(x));
                        }
                        Ok(ChainState::new(flow_forward(&v, &x, &grid)?.0))
                    })
                    .collect::<Result<Vec<_>>>()?;
                crate::mcmc::run_chains(
                    &kernel,
                    &target,
                    &base,
                    inits,
                    n,
                    s.burn_in.min(n),
                    derive_seed(p.cfg.seed, &[CHAIN_STREAM]),
                )
            })??;
            let trace_path = p.out.join("trace.csv");
            let mut head = vec!["chain".to_string(), "step".to_string()];
            head.extend(coords.iter().cloned());
            head.extend(["accepted".to_string(), "log_ratio".to_string()]);
            let mut w = CsvOut::create(&trace_path, &p.header, &head)?;
            for (c, r) in runs.iter().enumerate() {
                for t in &r.trace {
                    let mut row = vec![c.to_string(), t.step.to_string()];
                    row.extend(t.position.iter().map(|v| fmt(*v)));
                    row.extend([(t.accepted as u8).to_string(), fmt(t.log_ratio)]);
                    w.row(row)?;
                }
            }
            w.finish()?;
            let mut head = vec!["chain".to_string()];
            head.extend(coords.iter().cloned());
            let mut w = CsvOut::create(&samples_path, &p.header, &head)?;
            for (c, r) in runs.iter().enumerate() {
                for x in &r.samples {
                    let mut row = vec![c.to_string()];
                    row.extend(x.iter().map(|v| fmt(*v)));
                    w.row(row)?;
                }
            }
            w.finish()?;
            let (per_chain, pooled) = chain_tables(&runs, &obs)?;
            write_chain_table(&diag_path, &p.header, &per_chain, Some(&pooled), pooled.acceptance_rate)?;
            Ok(vec![diag_path, samples_path, trace_path])
        }
    }
}

/// Per-chain statistics over `obs` and their pooled combination.
fn chain_tables(runs: &[ChainRun], obs: &[Observable]) -> Result<(Vec<(String, ChainStats)>, ChainStats)> {
    let mut rescored = Vec::with_capacity(runs.len());
    for r in runs {
        let mut st = chain_diagnostics(&r.samples, obs)?;
        st.n_steps = r.stats.n_steps;
        st.n_accepted = r.stats.n_accepted;
        st.n_failed = r.stats.n_failed;
        st.acceptance_rate = r.stats.acceptance_rate;
        rescored.push(ChainRun { stats: st, ..r.clone() });
    }
    let pooled = pool_stats(&rescored)?;
    let per = rescored.into_iter().enumerate().map(|(c, r)| (c.to_string(), r.stats)).collect();
    Ok((per, pooled))
}

const CHAIN_COLUMNS: [&str; 9] =
    ["chain", "observable", "n_samples", "mean", "variance", "iact", "ess", "iact_capped", "acceptance_rate"];

fn write_chain_table(
    path: &Path,
    header: &str,
    per_chain: &[(String, ChainStats)],
    pooled: Option<&ChainStats>,
    pooled_acceptance: f64,
) -> Result<()> {
    let mut w = CsvOut::create(path, header, &CHAIN_COLUMNS)?;
    let mut emit = |label: &str, st: &ChainStats, acc: f64| -> Result<()> {
        for j in 0..st.observables.len() {
            w.row([
                label.to_string(),
                st.observables[j].clone(),
                st.n_samples.to_string(),
                fmt(st.mean[j]),
                fmt(st.variance[j]),
                fmt(st.iact[j].value),
                fmt(st.ess[j]),
                (st.iact[j].capped as u8).to_string(),
                fmt(acc),
            ])?;
        }
        Ok(())
    };
    for (label, st) in per_chain {
        let acc = if st.n_steps == 0 || pooled_acceptance.is_nan() { f64::NAN } else { st.acceptance_rate };
        emit(label, st, acc)?;
    }
    if let Some(st) = pooled {
        if per_chain.len() > 1 {
            emit("pooled", st, pooled_acceptance)?;
        }
    }
    w.finish()
}

pub fn cmd_diagnose(a: &DiagnoseArgs) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for path in &a.files {
        let text = std::fs::read_to_string(path)?;
        if text.trim().is_empty() {
            return Err(Error::Config(format!("{}: file is empty", path.display())));
        }
        let header = text
            .lines()
            .find(|l| l.starts_with("# config_hash="))
            .map(str::to_string)
            .unwrap_or_else(|| "# config_hash=unknown seed=unknown".to_string());
        let table = read_table(path)?;
        let cols = coordinate_columns(&table.header);
        if cols.is_empty() {
            return Err(Error::Config(format!("{}: no coordinate columns x0, x1, ...", path.display())));
        }
        let col = |name: &str| table.header.iter().position(|h| h == name);
        let (chain_col, acc_col) = (col("chain"), col("accepted"));
        // chains in order of first appearance
        let mut labels: Vec<String> = Vec::new();
        let mut groups: Vec<(Vec<Vec<f64>>, usize)> = Vec::new();
        for (i, r) in table.rows.iter().enumerate() {
            let label = chain_col.map(|c| r[c].clone()).unwrap_or_else(|| "0".into());
            let g = match labels.iter().position(|l| *l == label) {
                Some(g) => g,
                None => {
                    labels.push(label);
                    groups.push((Vec::new(), 0));
                    groups.len() - 1
                }
            };
            let x = cols.iter().map(|&c| parse_cell(path, i, &r[c])).collect::<Result<Vec<f64>>>()?;
            groups[g].0.push(x);
            if let Some(c) = acc_col {
                groups[g].1 += (parse_cell(path, i, &r[c])? != 0.0) as usize;
            }
        }
        let obs: Vec<Observable> = (0..cols.len()).map(|coord| Observable::MeanCoordinate { coord }).collect();
        let runs = groups
            .into_iter()
            .map(|(xs, acc)| -> Result<ChainRun> {
                let mut stats = chain_diagnostics(&xs, &obs)?;
                stats.n_accepted = acc;
                stats.acceptance_rate = acc as f64 / xs.len() as f64;
                let last = xs.last().cloned().unwrap_or_default();
                Ok(ChainRun { samples: xs, stats, trace: Vec::new(), final_state: ChainState::new(last) })
            })
            .collect::<Result<Vec<_>>>()?;
        let pooled = pool_stats(&runs)?;
        let per: Vec<(String, ChainStats)> = labels.into_iter().zip(runs.into_iter().map(|r| r.stats)).collect();
        let acc = if acc_col.is_some() { pooled.acceptance_rate } else { f64::NAN };
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "trace".into());
        let dir = match &a.output_dir {
            Some(d) => {
                std::fs::create_dir_all(d)?;
                d.clone()
            }
            None => path.parent().map(Path::to_path_buf).unwrap_or_default(),
        };
        let out = dir.join(format!("{stem}_diagnostics.csv"));
        write_chain_table(&out, &header, &per, Some(&pooled), acc)?;
        written.push(out);
    }
    Ok(written)
}

/// CSV file that starts with the provenance line.
struct CsvOut {
    w: csv::Writer<File>,
}

impl CsvOut {
    fn create<S: AsRef<str>>(path: &Path, header: &str, columns: &[S]) -> Result<Self> {
        let mut f = File::create(path)?;
        writeln!(f, "{header}")?;
        let mut w = csv::Writer::from_writer(f);
        w.write_record(columns.iter().map(|c| c.as_ref())).map_err(csv_err)?;
        Ok(Self { w })
    }

    fn row<I, S>(&mut self, fields: I) -> Result<()>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.w.write_record(fields).map_err(csv_err)
    }

    fn finish(mut self) -> Result<()> {
        self.w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => Error::Io(e),
        other => Error::Config(format!("{other:?}")),
    }
}
