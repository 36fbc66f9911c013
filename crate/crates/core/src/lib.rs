//! Code-switched text generation as style transfer between two languages.
//!
//! The crate is organized around the training pipeline:
//!
//! - [`corpus`]: vocabulary with a language partition, sentence encoding,
//!   token language tagging and a deterministic synthetic bilingual corpus.
//! - [`model`]: transformer encoder-decoder generator conditioned on a style
//!   embedding, a latent-space discriminator, greedy decoding and the
//!   continuous-softmax decode / re-encode bridge.
//! - [`training`]: generator pretraining, alternating discriminator and
//!   generator updates, the two-stage pipeline and negative generation.
//! - [`metrics`]: multilingual index, language entropy, integration index and
//!   burstiness over token language tags.

pub mod corpus;
mod error;
pub mod metrics;
pub mod model;
pub mod training;

pub use error::{CsError, Result};
