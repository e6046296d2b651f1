//! Commercial premium optimization under margin, conversion and
//! demographic-parity objectives.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod baselines;
pub mod commands;
pub mod config;
pub mod data;
pub mod diff;
pub mod error;
pub mod eval;
pub mod hgr;
pub mod models;
pub mod optimize;
pub mod par;
pub mod pipeline;
pub mod plot;
pub mod rdc;
pub mod synth;

pub use error::{Error, EvalError, Result};
