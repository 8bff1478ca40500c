//! Unrolled model-based MRI reconstruction (MoDL) with two interchangeable
//! gradient engines: full-graph backpropagation and memory-efficient
//! learning by layer inversion.

pub mod autodiff;
pub mod cli;
pub mod error;
pub mod mel;
pub mod mri;
pub mod tensor;
pub mod train;
pub mod unrolled;

pub use error::{Error, Result};
