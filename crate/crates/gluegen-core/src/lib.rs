//! gluegen-core: train translator networks that graft new condition encoders
//! onto a frozen downstream consumer, plus the inference-time operators and
//! diagnostics that go with them.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`] — dense arrays, tape autodiff, parameter stores;
//! * [`model`] — mixer translator (encoder/decoder) and discriminator;
//! * [`objectives`] — MSE, token-reweighted MSE, adversarial and
//!   reconstruction losses;
//! * [`fusion`] — top-K fusion, dissimilarity maps, guidance combination;
//! * [`data`] — embedding stores, the GGE interchange format, pairing,
//!   batching, synthetic corpora;
//! * [`train`] — AdamW, the training loop, GGCK checkpoints;
//! * [`diagnostics`] — PCA projections and CSV exports.

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod fusion;
pub mod model;
pub mod objectives;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
