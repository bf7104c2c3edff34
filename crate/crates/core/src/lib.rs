//! Fairness-aware attention for contrastive learning.
//!
//! Learned attention over protected attributes reweights the negatives of a
//! contrastive objective (FARE), optionally restricted to LSH-derived supports
//! (SparseFARE). Baselines (InfoNCE, clustered Fair-InfoNCE, CCLK), a small
//! training harness and fairness/accuracy evaluation live alongside.

pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod fare;
pub mod harness;
pub mod kernels;
pub mod losses;
pub mod numerics;
pub mod sparse;

pub use error::{Error, Result};
