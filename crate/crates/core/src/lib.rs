//! Robocentric error-state EKF for visual-inertial odometry.
//!
//! The filter fuses IMU propagation with relative camera-pose measurements
//! carrying learned, per-measurement covariances, and optionally estimates a
//! translation scale. A photometric view-synthesis loss built on the filter's
//! posterior poses makes the whole pipeline a differentiable objective,
//! exercised here through finite differences.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod eval;
pub mod filter;
pub mod gradcheck;
pub mod lie;
pub mod measurements;
pub mod photometric;
pub mod propagation;
pub mod scenario;
pub mod sim;
pub mod state;
pub mod text;
pub mod trajectory;
pub mod update;

#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
