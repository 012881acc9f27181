//! Synthetic wireless spectrogram datasets and a masked-modeling transformer
//! foundation model with protocol experts, top-1 routing and few-shot
//! evaluation.

pub mod autodiff;
pub mod baseband;
pub mod channel;
pub mod config;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod moe;
pub mod objectives;
pub mod seed;
pub mod specgen;

pub use error::{Error, Result};
