//! Frequency-aware selective state-space restoration for rain removal.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`autograd`], [`ops`]: dense NCHW tensors and a reverse-mode tape.
//! - [`fourier`], [`wavelet`]: DFT amplitude/phase analysis and Haar wavelet packets.
//! - [`scan`]: 2D traversal orders and the selective state-space scan.
//! - [`block`]: the three-branch FreqSSM block and degradation prior attention.
//! - [`model`]: the multi-scale U-Net and its checkpoint format.
//! - [`training`]: losses, metrics, optimizer, synthetic rain and the training loop.
//! - [`verify`]: the gradient-check suite over all of the above.

pub mod autograd;
pub mod block;
pub mod error;
pub mod fourier;
pub mod image;
pub mod model;
pub mod ops;
pub mod params;
pub mod scan;
pub mod tensor;
pub mod training;
pub mod verify;
pub mod wavelet;

pub use autograd::{grad_check, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
