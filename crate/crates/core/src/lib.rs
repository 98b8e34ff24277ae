// NaN-rejecting range checks are written as negated comparisons on purpose;
// index loops mirror the per-coordinate math.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod aggregate;
pub mod checkpoint;
pub mod commands;
pub mod config;
mod csvio;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod loss;
pub mod model;
pub mod seeding;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
