//! Prototype-then-edit language modelling with a sparse prototype library.
//!
//! A sentence is generated by picking a prototype sentence from a library,
//! drawing an edit vector on the unit sphere, and decoding the sentence
//! with an attentional LSTM conditioned on both. The prototype distribution
//! carries a symmetric Dirichlet prior; training maximises an evidence lower
//! bound with an amortised prototype retriever and inverse editor, and the
//! Dirichlet posterior is updated by stochastic variational inference.
//! After training, the library is pruned to the prototypes that hold most of
//! the posterior mass.
//!
//! Module map:
//!
//! - [`corpus`]: vocabulary, encoding, sentence embeddings, the prototype
//!   library and a synthetic templated corpus generator.
//! - [`align`]: minimum edit distance alignment of token sequences.
//! - [`tensor`]: a small tape-based reverse-mode differentiation engine,
//!   LSTM/attention building blocks, parameters and Adam.
//! - [`dist`]: special functions, von Mises-Fisher and Dirichlet machinery.
//! - [`model`]: retriever, inverse editor, editor and the baseline LM.
//! - [`train`]: objective, score-function gradients and the training loop.
//! - [`eval`]: importance-weighted likelihood, perplexity and BLEU.
//! - [`cli`]: the command-line pipeline.

pub mod align;
pub mod cli;
pub mod corpus;
pub mod dist;
pub mod error;
pub mod eval;
pub mod model;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
