//! Flexible-modal face anti-spoofing toolkit.
//!
//! One RGB+Depth+IR model is trained once and deployed under any modality
//! subset that contains RGB; missing modalities are zero-blocked.

pub mod augment;
pub mod autograd;
pub mod backbones;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod efficiency;
pub mod error;
pub mod fsutil;
pub mod fusion;
mod linalg;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod protocols;
pub mod sample;
pub mod synthgen;
pub mod tensor;
pub mod trainer;

pub use error::{FlexError, Result};
