#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data;
pub mod error;
pub mod explain;
pub mod metrics;
pub mod nn;
pub mod optlayers;
pub mod pipeline;
pub mod plausibility;
pub mod vae;

pub use error::{Error, Result};
