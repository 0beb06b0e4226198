//! Binary checkpoint container.
//!
//! All integers and floats are little endian.
//!
//! | bytes            | content                                       |
//! |------------------|-----------------------------------------------|
//! | 8                | magic `FLOWMCCK`                              |
//! | 4                | format version (`u32`)                        |
//! | 4 + n            | architecture descriptor, JSON                 |
//! | 4 + n            | training config, JSON                         |
//! | 8                | completed iterations (`u64`)                  |
//! | 8 + 8 p          | parameter count and parameters (`f64` bits)   |
//! | 4 + n, 8, 8      | RNG block: generator name, root seed, counter |
//! | 4 + n            | trainer state (optimizer, chains, buffer), JSON |

use std::path::Path;

use serde::{de::DeserializeOwned, Serialize};

use super::{TrainConfig, TrainerState};
use crate::error::{Error, Result};
use crate::field::{ArchDescriptor, VelocityField};

pub const MAGIC: &[u8; 8] = b"FLOWMCCK";
pub const FORMAT_VERSION: u32 = 1;
/// Name of the counter-based generator recorded in the RNG block.
pub const RNG_NAME: &str = "chacha8/splitmix-path";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub field: VelocityField,
    pub config: TrainConfig,
    /// Number of completed iterations.
    pub step: u64,
    pub state: TrainerState,
}

fn json<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    serde_json::to_vec(v).map_err(|e| Error::Format(e.to_string()))
}

fn put_block(out: &mut Vec<u8>, bytes: &[u8]) -> Result<()> {
    let n = u32::try_from(bytes.len()).map_err(|_| Error::Format("block too large".into()))?;
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(bytes);
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated checkpoint while reading {what}")))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn block(&mut self, what: &str) -> Result<&'a [u8]> {
        let n = self.u32(what)? as usize;
        self.take(n, what)
    }

    fn json<T: DeserializeOwned>(&mut self, what: &str) -> Result<T> {
        let b = self.block(what)?;
        serde_json::from_slice(b).map_err(|e| Error::Format(format!("bad {what}: {e}")))
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let desc = self.field.descriptor()?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_block(&mut out, &json(&desc)?)?;
        put_block(&mut out, &json(&self.config)?)?;
        out.extend_from_slice(&self.step.to_le_bytes());
        let p = self.field.params();
        out.extend_from_slice(&(p.len() as u64).to_le_bytes());
        for v in p {
            out.extend_from_slice(&v.to_le_bytes());
        }
        put_block(&mut out, RNG_NAME.as_bytes())?;
        out.extend_from_slice(&self.config.seed.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        put_block(&mut out, &json(&self.state)?)?;
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8, "magic")? != MAGIC {
            return Err(Error::Format("not a flowmc checkpoint (bad magic bytes)".into()));
        }
        let version = r.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version} (this build reads {FORMAT_VERSION})"
            )));
        }
        let desc: ArchDescriptor = r.json("architecture descriptor")?;
        let config: TrainConfig = r.json("training config")?;
        let step = r.u64("step")?;
        let n = r.u64("parameter count")? as usize;
        if n != desc.n_params() {
            return Err(Error::Format(format!(
                "architecture expects {} parameters but the checkpoint holds {n}",
                desc.n_params()
            )));
        }
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("bad parameter count".into()))?, "parameters")?;
        let params: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let rng_name = r.block("rng block")?;
        if rng_name != RNG_NAME.as_bytes() {
            return Err(Error::Format(format!("unknown generator {:?}", String::from_utf8_lossy(rng_name))));
        }
        let seed = r.u64("rng seed")?;
        let counter = r.u64("rng counter")?;
        if seed != config.seed || counter != step {
            return Err(Error::Format("RNG block disagrees with config seed or step".into()));
        }
        let state: TrainerState = r.json("trainer state")?;
        if r.pos != buf.len() {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        let field = VelocityField::from_descriptor(&desc, params).map_err(|e| Error::Format(e.to_string()))?;
        Ok(Self { field, config, step, state })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Loads and checks that the stored field has the expected architecture.
    pub fn load_expecting(path: &Path, expected: &ArchDescriptor) -> Result<Self> {
        let ck = Self::load(path)?;
        let got = ck.field.descriptor()?;
        if &got != expected {
            return Err(Error::Format(format!(
                "architecture mismatch: checkpoint has {}, expected {}",
                serde_json::to_string(&got).unwrap_or_default(),
                serde_json::to_string(expected).unwrap_or_default()
            )));
        }
        Ok(ck)
    }
}

pub fn checkpoint_save(f: &VelocityField, cfg: &TrainConfig, step: u64, path: &Path) -> Result<()> {
    Checkpoint { field: f.clone(), config: cfg.clone(), step, state: TrainerState::default() }.save(path)
}

pub fn checkpoint_load(path: &Path) -> Result<(VelocityField, TrainConfig, u64)> {
    let ck = Checkpoint::load(path)?;
    Ok((ck.field, ck.config, ck.step))
}
