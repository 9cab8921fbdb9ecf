//! Zero-shot super-resolution with depth-guided internal exemplars.

// `!(d < t)` is deliberate: NaN comparisons must take the rejecting branch
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod eval;
pub mod image;
pub mod inference;
pub mod io;
pub mod patchdb;
pub mod scales;
pub mod srnet;
pub mod trainer;
pub mod config;
pub mod pipeline;

pub use error::{Error, Result};
