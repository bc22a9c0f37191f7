//! Discrete vocabulary descriptors for collaborative-filtering embeddings.
//!
//! A CF backbone (GMF or LightGCN) produces user and item vectors. The mapper
//! splits each vector into `n` aspects, encodes them, and residual-quantizes
//! them against a frozen language-model vocabulary seen through a trainable
//! projection. The first quantization level gives one descriptor token per
//! aspect. A contrastive term pulls descriptor sentences toward fixed summary
//! embeddings.

// `!(x > 0.0)` style checks are there to reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alignment;
pub mod autograd;
pub mod backbone;
pub mod checkpoint;
pub mod codebook;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fixture;
pub mod mapper;
pub mod nn;
pub mod params;
pub mod sparse;
pub mod trainer;
pub mod workspace;

pub use config::TrainConfig;
pub use error::{FaceError, Result};
pub use trainer::{FaceModel, Trainer};
pub use workspace::Workspace;
