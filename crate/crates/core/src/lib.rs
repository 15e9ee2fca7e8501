//! Dual dynamic inference for convolutional networks.
//!
//! Residual and dense backbones carry two kinds of learned gates: a shared
//! recurrent layer gate that decides whether a block runs at all, and a
//! per-block convolutional channel gate that picks which output channels run.
//! Branch classifiers along the depth give early exits for hard compute or
//! energy budgets. The crate covers training, cost accounting, inference and
//! reporting.

pub mod backbone;
pub mod cli;
pub mod costmodel;
pub mod data;
pub mod error;
pub mod gating;
pub mod numerics;
pub mod runtime;
pub mod seeds;
pub mod trace;
pub mod training;

pub use error::{Error, Result};

/// Engine version recorded in every output.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
