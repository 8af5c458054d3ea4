//! HAN-ME: heterogeneous graph attention over full metapath instances.
//!
//! The crate is organized bottom-up:
//!
//! - [`graph`]: the typed graph container, dataset directory format, feature
//!   pooling and a planted-community generator.
//! - [`metapath`]: enumeration of every metapath instance, intermediates kept.
//! - [`engine`]: a small reverse-mode tape, Adam, finite-difference checks and
//!   checkpoint files.
//! - [`encoders`]: the multi-hop diffusion and direct attention instance
//!   encoders, with the matrix-series reference computation.
//! - [`model`]: projection, instance attention, semantic fusion and the loss.
//! - [`trainer`]: curriculum pacing, early stopping and F1 evaluation.
//! - [`verify`]: the self-check suite behind `hanme verify`.

pub mod encoders;
pub mod engine;
pub mod error;
pub mod graph;
pub mod metapath;
pub mod model;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;
