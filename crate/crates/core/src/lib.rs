// `!(x > 0.0)` style guards reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod cli;
pub mod error;
pub mod linalg;
pub mod sampling;
pub mod tasks;
pub mod theory;
pub mod training;
