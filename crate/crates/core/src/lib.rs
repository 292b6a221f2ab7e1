//! Masked-image pre-training with a patch codebook, plus the synthetic data,
//! alignment, training, and evaluation machinery needed to exercise it end
//! to end on a CPU.

pub mod checkpoint;
pub mod codebook;
pub mod config;
pub mod data;
pub mod eval;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod mask;
pub mod model;
pub mod optim;
pub mod params;
pub mod patch;
pub mod pretrain;
pub mod rng;

pub use config::{Phase, RunConfig};
pub use error::{PacoError, Result};
