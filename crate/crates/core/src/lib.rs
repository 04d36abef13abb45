//! Few-shot segmentation by 4D convolutions over multi-layer correlation pyramids.

pub mod arch;
pub mod autodiff;
pub mod checkpoint;
pub mod conv4d;
pub mod correlation;
pub mod decoder;
pub mod episode;
pub mod error;
pub mod io;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod norm;
pub mod optim;
pub mod par;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::{DType, Real};
pub use tensor::Tensor;
