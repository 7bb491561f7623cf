//! Carry-on adaptors: a small trainable transformer that reads taps from a
//! frozen base model, possibly over the network, and adds a gated residual
//! to the base's final hidden state.

// `!(x >= 0.0)` is how NaN gets rejected; the f64 casts matter in f32 builds.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::unnecessary_cast)]

pub mod basemodel;
pub mod bridge;
pub mod carryon;
pub mod data;
pub mod error;
pub mod evalkit;
pub mod numcore;
pub mod splitnode;
pub mod trainer;

pub use error::{Error, Result};
