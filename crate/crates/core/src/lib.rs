//! Atrous residual 3D UNet with attention: tensors, reverse-mode autodiff,
//! network blocks, training, data handling and self-verification.

pub mod autodiff;
pub mod blocks;
pub mod data;
pub mod error;
pub mod inference;
pub mod model;
pub mod ops;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
