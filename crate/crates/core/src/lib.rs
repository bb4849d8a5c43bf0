//! Joint supervised and self-supervised learning (JSSL) for accelerated MRI
//! reconstruction at desk scale.

pub mod autograd;
mod conv;
pub mod data;
pub mod error;
pub mod eval;
pub mod fft;
pub mod losses;
pub mod models;
pub mod mri;
pub mod report;
pub mod sampling;
pub mod stats;
pub mod tensor;
pub mod theory;
pub mod tnsr;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
