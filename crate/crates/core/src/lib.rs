//! Regression-based projection for learning Mori–Zwanzig operators.
//!
//! Snapshot data of a partially observed dynamical system is arranged in an
//! `N × M × K` [`datamat::DataMatrix`]. Any regression family from
//! [`regress`] can serve as the projection operator; [`mzlearn`] extracts the
//! Markov operator, the memory operators and the orthogonal-dynamics samples
//! order by order, and [`predict`] rolls the truncated generalized Langevin
//! equation forward. [`evalmod`] holds the evaluation metrics.

// `!(x > 0.0)` is used on purpose so NaN parameters are rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod datamat;
pub mod dynamics;
pub mod error;
pub mod evalmod;
pub mod linalg;
pub mod mzlearn;
pub mod predict;
pub mod regress;

pub use error::{Error, Result};
