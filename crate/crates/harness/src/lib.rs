//! Data, training, evaluation and ablation runs for the `farmamba` network.

pub mod ablation;
pub mod config;
pub mod data;
pub mod model;
pub mod optim;
pub mod synthetic;
pub mod trainer;
pub mod verify;

use std::path::{Path, PathBuf};

use farmamba_core::TensorError;

pub use config::{AblationFlags, Precision, RunConfig};
pub use data::Dataset;
pub use synthetic::SyntheticSpec;
pub use trainer::{train, EpochRow, TrainOutcome};

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {msg}")]
    Io { path: PathBuf, msg: String },
    #[error("dataset: {0}")]
    Data(String),
    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFinite { epoch: usize, step: usize, detail: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

impl HarnessError {
    pub fn io(path: &Path, e: impl std::fmt::Display) -> Self {
        HarnessError::Io {
            path: path.to_path_buf(),
            msg: e.to_string(),
        }
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;

/// Stateless seed derivation (splitmix64 over the parts).
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x243f_6a88_85a3_08d3;
    for &p in parts {
        h ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        let mut z = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}
