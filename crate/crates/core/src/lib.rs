//! Word-sensitivity laboratory.
//!
//! Random-feature (RF), deep random-feature (DRF) and random-attention-feature
//! (RAF) maps over token matrices, estimators and constructions for the
//! single-word sensitivity of those maps, and generalized linear models on top
//! of them that are fine-tuned or retrained on single-word-flip pairs.

pub mod attack;
pub mod config;
pub mod construct;
pub mod data;
pub mod error;
pub mod featmaps;
pub mod glm;
pub mod linalg;
pub mod optim;
pub mod rng;
pub mod sensitivity;
pub mod sweep;

pub use error::{Result, WsError};
