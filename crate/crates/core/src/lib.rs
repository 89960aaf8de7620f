#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli_io;
pub mod dynamics;
pub mod integrator;
pub mod shooting;
pub mod solver;
