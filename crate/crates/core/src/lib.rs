//! Heat-kernel learning: kernels shaped by a discretized heat flow, used
//! for particle-based Bayesian inference and kernel-based generative models.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cli;
pub mod error;
pub mod genmodel;
pub mod hklearn;
pub mod kernels;
pub mod oracles;
pub mod svgd;
pub mod transport;

pub use error::{Error, Result};
