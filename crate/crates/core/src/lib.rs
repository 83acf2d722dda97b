//! Local polynomial estimation and robust bias-corrected inference for
//! heterogeneous treatment effects in sharp regression discontinuity designs.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bandwidth;
pub mod covariates;
pub mod data;
pub mod design;
pub mod error;
pub mod estimator;
pub mod kernel;
pub mod montecarlo;
mod parallel;
pub mod posthoc;
pub mod report;
pub mod results;
pub mod wls;

pub use error::{RdError, Result};
