// Validation compares with negated operators so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::too_many_arguments)]

pub mod autodiff;
pub mod cli;
pub mod contrast;
pub mod error;
pub mod eval;
pub mod features;
pub mod frame;
pub mod geometry;
pub mod io;
pub mod model;
pub mod render;
pub mod scene;
pub mod train;

pub use error::{Error, Result};
