//! Minimal reverse-mode differentiable array engine.
//!
//! Operations are recorded on a [`Tape`] as they execute; [`Tape::backward`]
//! walks the record in reverse and accumulates gradients for every node that
//! depends on a trainable leaf. Parameters live outside the tape in a
//! [`ParamStore`] and are bound onto a fresh tape for each forward pass.
//!
//! The crate also carries the optimizers ([`Adam`], global-norm clipping),
//! the slanted triangular learning-rate schedule and the binary checkpoint
//! format shared by the models built on top of it.

mod checkpoint;
mod error;
mod ops;
mod optim;
mod params;
mod scalar;
mod tape;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
};
pub use error::{NumError, Result};
pub use optim::{clip_global_norm, Adam, AdamConfig, StlrSchedule};
pub use params::{Binding, ParamStore};
pub use scalar::{DType, Scalar};
pub use tape::{Gradients, Tape, Var};

pub use ndarray;
