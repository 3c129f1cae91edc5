//! Rank selection for low-rank factorized vision transformers, cast as a
//! one-shot architecture search.
//!
//! The pipeline: train a small dense ViT, factor every compressible linear
//! layer with a truncated SVD, filter each block's rank choices with a cheap
//! local supernet, train a weight-sharing supernet whose rank-`r` factors are
//! column prefixes of the largest factors, then search rank configurations
//! under a FLOPs window with an evolutionary algorithm.

pub mod checkpoint;
pub mod config;
pub mod cost;
pub mod data;
pub mod error;
pub mod filter;
pub mod flops;
pub mod layers;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod report;
pub mod search;
pub mod supernet;
pub mod train;

pub use error::{Error, FormatError, Result};
pub use linalg::{Matrix, SvdResult};
