//! Learned similarity digests for binary files.

pub mod cli;
pub mod error;
pub mod eval;
pub mod features;
pub mod kernel_net;
pub mod perturb;
pub mod sahash;
pub mod similarity;
pub mod stats;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
