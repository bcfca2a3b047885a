//! System level tube MPC with an asynchronous split between a fast primary
//! controller over a memory of tubes and a slower secondary tube optimiser.

// `!(x > 0.0)` is used on purpose so NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod model;
pub mod ocp;
pub mod polytope;
pub mod runtime;
pub mod sim;
pub mod slp;
pub mod verify;

pub use error::{Error, Result};
