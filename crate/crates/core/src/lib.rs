// SPDX-License-Identifier: MIT OR Apache-2.0

//! Stochastic parameter decomposition of toy neural networks.

// `!(x > 0.0)` is used on purpose to reject NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod activation;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod rng;
pub mod spd;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
