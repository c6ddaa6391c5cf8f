//! Numerical core for query-weight elimination in multi-head attention.
//!
//! Everything here is a pure function of its inputs (plus an explicit [`Rng`]
//! where sampling is involved). The crate is `no_std` and only needs `alloc`;
//! file formats, reports and the command line live in the `qelim` crate.
//!
//! Conventions: transformer activations are row-major `n × d_model` matrices
//! and weights act by right multiplication (`X · W`). The LayerNorm and
//! skip-absorption modules work on column vectors (`W · x`).

#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod attention;
mod error;
pub mod linalg;
pub mod mlpexp;
pub mod model;
pub mod normconj;
pub mod reluskip;
pub mod reparam;
pub mod rng;

pub use error::{Error, Result};
pub use linalg::Matrix;
pub use rng::Rng;
