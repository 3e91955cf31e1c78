//! Experiment driver: configuration, built-in presets and the
//! generate / learn / predict / evaluate pipeline behind the `regmz` binary.

// `!(x > 0.0)` is used on purpose so NaN settings are rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod pipeline;
pub mod presets;
