// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod data;
pub mod eval;
pub mod losses;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod verify;
