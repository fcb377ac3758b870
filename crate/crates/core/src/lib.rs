//! Numerical verification toolkit for the elliptic Calogero-Moser system and
//! its Z_n-symmetric twisted Lax representation.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod cmmodel;
pub mod elliptic;
pub mod error;
pub mod phasespace;
pub mod sampling;
pub mod tensorops;
pub mod twist;
pub mod verify;
pub mod znalgebra;

pub use error::{LaxError, Result};
