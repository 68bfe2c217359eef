//! Multi-class token transformer for weakly supervised object localization.
//!
//! A small vision transformer carries one class token per class. Class
//! scores come from average-pooling each output class token, which ties
//! token `c` to class `c`; the class-to-patch attention of those tokens then
//! serves as a class-specific localization map. Patch-to-patch attention is
//! reused as an affinity operator to refine the maps, and the V2 variant adds
//! a convolutional CAM head over the patch tokens whose maps are fused with
//! the attention maps.
//!
//! Modules:
//! - [`autodiff`]: dense tensors and reverse-mode differentiation
//! - [`model`]: the encoder and its heads
//! - [`maps`]: attention extraction, fusion, affinity refinement
//! - [`training`]: losses, AdamW and the training loop
//! - [`data`]: synthetic scenes and seed evaluation

pub mod autodiff;
pub mod data;
pub mod error;
pub mod maps;
pub mod model;
pub mod parallel;
pub mod training;

pub use error::{MctError, Result};
pub use parallel::Execution;
