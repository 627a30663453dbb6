//! Multi-task age and gender prediction from face images.
//!
//! A from-scratch stack: a reverse-mode-differentiable tensor core, residual
//! and attention-based convolutional backbones with a shared two-headed
//! output, gender-augmented age classification, ensemble inference, training
//! with Adam, and an evaluation suite (accuracy, average age-bucket absolute
//! difference, confusion matrices, probability histograms, attention-map
//! export).

pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod pnm;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod weights;

pub use error::{Error, Result};
pub use scalar::{Dtype, Scalar};
pub use tensor::Tensor;
