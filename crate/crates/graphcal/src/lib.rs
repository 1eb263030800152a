//! Graph convolutional network training with per-layer weight decay,
//! confidence calibration, calibration metrics and numerical checks of the
//! underlying update-rule and closed-form theory.

pub mod calibrate;
pub mod error;
pub mod gcnmodel;
pub mod graphdata;
pub mod metrics;
pub mod numerics;
pub mod theory;

pub use error::{Error, Result};
