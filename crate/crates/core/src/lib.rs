#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod atlas;
pub mod config;
pub mod dipole;
pub mod error;
pub mod fft;
pub mod io;
pub mod phase;
pub mod pipeline;
pub mod relaxometry;
pub mod roi;
pub mod separation;
pub mod simulator;
pub mod volume;

pub use error::{Error, Result};
