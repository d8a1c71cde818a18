//! Joint autoregressive / mask-predict caption models with confidence-targeted
//! calibration of the autoregressive decoder, built on a small
//! double-precision autodiff engine.
pub mod analysis;
pub mod calibration;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod par;
pub mod tensor;
pub mod vocab;

pub use error::{Error, Result};

#[cfg(test)]
mod testutil;
