//! Mixture-of-GMM classifier head trained with a dual-supervised
//! variational objective, plus uncertainty scoring and detection metrics.

pub mod data;
pub mod error;
pub mod mogmm;
pub mod model;
pub mod nn;
pub mod tape;
pub mod tensor;
pub mod uq;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
