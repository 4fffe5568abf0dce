//! Video-to-Foley bridge: a trainable video cross-attention sublayer inside
//! every block of a frozen text-to-audio diffusion transformer, with the data
//! curation pipeline and evaluation metrics around it.

pub mod attention;
pub mod backbone;
pub mod blob;
pub mod bridge;
pub mod cli;
pub mod config;
pub mod curation;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
