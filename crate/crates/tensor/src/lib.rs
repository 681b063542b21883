//! Deterministic CPU tensors with tape-based reverse-mode differentiation,
//! covering the layers of a small DCGAN-style discriminator and generator,
//! plus Adam and a flat checkpoint format.

pub mod adam;
pub mod checkpoint;
mod element;
mod error;
pub mod kernels;
mod params;
pub mod tape;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use checkpoint::Checkpoint;
pub use element::Element;
pub use error::{Error, Result};
pub use params::{ParamEntry, Parameters};
pub use tape::{BatchStats, Gradients, Mode, Tape, Var, BN_EPS, LOG_FLOOR};
pub use tensor::Tensor;
