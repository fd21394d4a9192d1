#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod coeffgen;
pub mod quadrature;
pub mod sparse;
pub mod mesh1d;
pub mod linalg;
pub mod spacedisc;
pub mod integrator;
pub mod stability;
pub mod harness;
