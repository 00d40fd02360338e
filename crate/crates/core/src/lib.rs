//! Visual-inertial localization against a prior keyframe map, with a Schmidt
//! treatment of the map states, plus a synthetic scenario generator and
//! evaluation harness.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod epnp;
pub mod error;
pub mod eval;
pub mod filter;
pub mod geometry;
pub mod global;
pub mod imu;
pub mod io;
pub mod local;
pub mod sim;
pub mod state;
pub mod update;

pub use error::{Error, Result};
