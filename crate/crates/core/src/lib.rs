//! SliceNet: convolutional sequence-to-sequence translation built from
//! depthwise separable convolutions.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`]: dense tensors and a reverse-mode autodiff tape
//! * [`convops`]: the 1D convolution family (full, depthwise separable,
//!   grouped, super-separable), padding, parameter cost and
//!   receptive-field analysis
//! * [`layers`]: layer norm, convolution steps and modules, timing signal,
//!   attention
//! * [`model`]: the encoder / mixer / decoder stack, parameter store and
//!   checkpoints
//! * [`training`]: loss and metrics, Adam, the training loop, synthetic
//!   tasks and corpora
//! * [`decoding`]: greedy and beam search with length penalty
//! * [`cli`]: configuration files and the `slicenet` command surface

pub mod cli;
pub mod convops;
pub mod decoding;
mod error;
pub mod layers;
pub mod model;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Rng, Tape, Tensor, TensorError, Var};
