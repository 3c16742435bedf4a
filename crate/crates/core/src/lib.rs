#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod dfi;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod rbm;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Matrix, Rng};
