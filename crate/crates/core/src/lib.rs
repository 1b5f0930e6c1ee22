//! Consistent video editing with a pretrained image diffusion model.
//!
//! Keyframes are edited jointly with extended attention; the edited
//! attention outputs are then carried to every other frame through
//! nearest-neighbour correspondences computed on the original video's
//! tokens.

pub mod attention;
pub mod correspondence;
pub mod diffusion;
pub mod error;
pub mod evalkit;
pub mod pipeline;
pub mod propagation;
pub mod tensors;

pub use error::{Error, Result};
pub use tensors::Tensor;
