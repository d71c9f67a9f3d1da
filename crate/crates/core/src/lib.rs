//! Hybrid sequential recommender combining learned item-ID embeddings with
//! frozen text-encoder features resampled by a Perceiver.

// `!(x > 0.0)` style checks are used on purpose: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod error;
pub mod eval;
pub mod flare;
pub mod nn;
pub mod synth;
pub mod textenc;
pub mod train;

pub use error::{Error, Result};
