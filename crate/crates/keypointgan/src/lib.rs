//! Unsupervised 2D landmark detection trained from unlabelled image pairs
//! plus an unpaired pose prior.
//!
//! The model couples a dual pose representation (keypoint coordinates and an
//! analytically rendered skeleton image) with conditional image
//! reconstruction and an adversarial match against the prior distribution.
//! See the `kpgan` binary for the command-line workflow.

pub mod data;
pub mod error;
pub mod models;
pub mod objectives;
pub mod pose;
pub mod tensor;

pub use error::{Error, Result};

/// Entry point used by the `kpgan` binary; returns the process exit code.
pub fn cli_main() -> i32 {
    eprintln!("cli not wired yet");
    1
}
