//! Compressed-sensing MRI reconstruction with chained residual generators,
//! a Wasserstein critic and a cyclic data-consistency loss.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod dataset;
pub mod error;
pub mod fft;
pub mod kspace;
pub mod losses;
pub mod masks;
pub mod metrics;
pub mod network;
pub mod plot;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
