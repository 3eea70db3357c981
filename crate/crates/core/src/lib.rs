//! Parameter-synchronization lab: ADSP and the BSP, SSP, TAP and ADACOMM
//! baselines on a deterministic virtual-time cluster.

// `!(x > 0.0)` is used on purpose so NaN fails the check
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod cli;
pub mod config;
pub mod engine;
pub mod error;
pub mod params;
pub mod scheduler;
pub mod sync;
pub mod workloads;

pub use error::{Error, Result};
