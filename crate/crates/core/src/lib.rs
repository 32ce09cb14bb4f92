// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod diagnostics;
pub mod dual;
pub mod error;
pub mod oracles;
pub mod problems;
pub mod program;
pub mod queue;
pub mod reference;
pub mod solver;
pub mod trace;
