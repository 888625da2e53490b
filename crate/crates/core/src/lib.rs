// `!(x > 0.0)` is how configs reject NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autonomy;
pub mod error;
pub mod harness;
pub mod microscope;
pub mod perception;
pub mod scene;
pub mod texture;

pub use error::{Error, Result};
