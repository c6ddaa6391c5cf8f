//! File formats, reports and the `qelim` command line on top of
//! [`qelim_core`].

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod arch;
pub mod checkpoint;
pub mod cli;
mod error;
pub mod files;
pub mod parallel;
pub mod reports;

pub use error::{exit, Error, Result};
