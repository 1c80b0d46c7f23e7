//! Hybrid transformer / state-space restoration networks: blocks, U-Net
//! assembly, feature distillation, synthetic tasks and the bi-objective
//! architecture search.

pub mod blocks;
pub mod distill;
mod error;
pub mod library;
pub mod search;
pub mod tasks;
pub mod unet;

pub use error::{EnsError, Result};
