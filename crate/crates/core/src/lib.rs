//! A small laboratory for diversity-promoting neural dialogue generation.
//!
//! The crate covers the full loop: tokenization and token-frequency
//! statistics, a tape-based reverse-mode differentiation core, a residual
//! LSTM encoder-decoder, softmax cross-entropy and inverse-token-frequency
//! (ITF) losses, greedy decoding with MMI-antiLM / ITF / noisy logit
//! adjustments and a repetition suppressor, and the corpus metrics used to
//! judge quality (BLEU-1/2) and diversity (DIST-1/2).
//!
//! The [`pipeline`] module strings these together into the operations exposed
//! by the `divergen` command-line tool.

pub mod decoding;
pub mod error;
pub mod metrics;
pub mod numcore;
pub mod objectives;
pub mod pipeline;
pub mod rng;
pub mod seq2seq;
pub mod tokenfreq;

pub use error::{Error, Result};
