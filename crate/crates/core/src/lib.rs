pub mod cli;
pub mod config;
pub mod error;
pub mod field;
pub mod flow;
pub mod importance;
pub mod mcmc;
pub mod objectives;
mod par;
pub mod rng;
pub mod simfree;
pub mod targets;
pub mod trainer;
pub mod vecops;

pub use error::{Error, Result};
pub use par::with_workers;
