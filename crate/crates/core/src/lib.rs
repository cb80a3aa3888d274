//! Importance- and channel-aware device scheduling for federated edge learning.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod channel;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod latency;
pub mod learners;
pub mod scheduler;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
