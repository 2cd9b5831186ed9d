//! Robust stepwise estimation for heteroscedastic nonlinear regression.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod io;
pub mod kernels;
pub mod mm;
pub mod model;
pub mod nls;
pub mod pipeline;
pub mod scale;
pub mod seeds;
pub mod sim;

pub use error::{Error, Result};
pub use pipeline::{FitOptions, FitResult, Method, Weighting};
