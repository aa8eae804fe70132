//! A desk-scale laboratory for mixture-of-experts language models with
//! zero-computation experts.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytics;
pub mod blocks;
pub mod diffcore;
pub mod error;
pub mod harness;
pub mod router;
pub mod scaling;
pub mod stability;

pub use error::{Error, Result};
