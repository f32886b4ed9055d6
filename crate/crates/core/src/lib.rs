//! Slot Attention with interchangeable update-code normalizations, a von
//! Mises-Fisher mixture EM engine, a synthetic sprite dataset and the
//! training/evaluation harness that ties them together.

pub mod autoencoder;
pub mod checkpoint;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod slot_attention;
pub mod tensor;
pub mod theory;
pub mod vmf_em;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
