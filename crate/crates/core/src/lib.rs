//! Desk-scale end-to-end speech recognition toolkit built around two
//! domain-adaptation mechanisms: a replaceable internal language model
//! (RILM) inside the attention decoder, and a residual softmax
//! (R-softmax) that reweights CTC posteriors by target/source token
//! prior ratios. Everything runs on a small f64 tensor engine with
//! reverse-mode autodiff; corpora are synthetic and seed-deterministic.

pub mod adapt;
pub mod asr;
pub mod corpus;
pub mod decode;
pub mod error;
pub mod lm;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod tokenizer;

pub use error::{CoreError, Result};
