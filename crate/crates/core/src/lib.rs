//! Polarization-channel stabilization: drift models, heterodyne reference
//! measurement, three-axis feedback control, calibration, tomography and
//! drift spectrum analysis.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod calib;
pub mod channel;
pub mod control;
pub mod error;
pub mod harness;
pub mod hetdet;
pub mod polcore;
pub mod specan;
pub mod tomo;

pub use error::{Error, Result};
