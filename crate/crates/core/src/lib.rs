// `!(x > 0.0)` is how NaN parameters are rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod checks;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod model;
pub mod params;
pub mod phantom;
pub mod prototype;
pub mod reference;
pub mod selfsup;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
