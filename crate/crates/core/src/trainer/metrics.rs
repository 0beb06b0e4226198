use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const METRICS_COLUMNS: [&str; 9] = [
    "iteration",
    "loss",
    "grad_norm",
    "ess_fraction",
    "acceptance_rate",
    "batch_ess_fraction",
    "n_dropped",
    "lr",
    "wall_time",
];

/// One training iteration. `NaN` marks quantities not measured at that iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub iteration: u64,
    pub loss: f64,
    pub grad_norm: f64,
    /// Transport ESS fraction from the periodic evaluation.
    pub ess_fraction: f64,
    pub acceptance_rate: f64,
    /// ESS fraction of the batch weights, for weighted objectives.
    pub batch_ess_fraction: f64,
    pub n_dropped: u64,
    pub lr: f64,
    /// Seconds since the start of the run; zero unless wall time logging is on.
    pub wall_time: f64,
}

impl MetricsRow {
    pub fn fields(&self) -> [String; 9] {
        [
            self.iteration.to_string(),
            fmt(self.loss),
            fmt(self.grad_norm),
            fmt(self.ess_fraction),
            fmt(self.acceptance_rate),
            fmt(self.batch_ess_fraction),
            self.n_dropped.to_string(),
            fmt(self.lr),
            fmt(self.wall_time),
        ]
    }
}

/// Shortest round-trip formatting; `NaN`, `inf` and `-inf` for non-finite values.
pub fn fmt(x: f64) -> String {
    if x.is_nan() {
        "NaN".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x:?}")
    }
}

/// First 16 hex digits of the SHA-256 of the value's JSON form.
pub fn config_hash<T: Serialize>(value: &T) -> Result<String> {
    let json = serde_json::to_vec(value).map_err(|e| Error::Config(e.to_string()))?;
    let digest = Sha256::digest(&json);
    Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
}

pub fn header_line(hash: &str, seed: u64) -> String {
    format!("# config_hash={hash} seed={seed}")
}

/// Append-only metrics file. A new file starts with the provenance line and
/// column names; an existing one must carry the same provenance line.
pub struct MetricsWriter {
    file: File,
}

impl MetricsWriter {
    pub fn create(path: &Path, hash: &str, seed: u64) -> Result<Self> {
        let mut file = File::create(path)?;
        writeln!(file, "{}", header_line(hash, seed))?;
        writeln!(file, "{}", METRICS_COLUMNS.join(","))?;
        Ok(Self { file })
    }

    pub fn append(path: &Path, hash: &str, seed: u64) -> Result<Self> {
        let first = BufReader::new(File::open(path)?).lines().next().transpose()?;
        if first.as_deref() != Some(header_line(hash, seed).as_str()) {
            return Err(Error::Config(format!(
                "{} was written by a different config or seed",
                path.display()
            )));
        }
        Ok(Self { file: OpenOptions::new().append(true).open(path)? })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        writeln!(self.file, "{}", row.fields().join(","))?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.file.flush()?;
        Ok(())
    }
}
