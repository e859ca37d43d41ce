//! Contrastive query-intent generation.
//!
//! The pipeline has two stages. Intent-driven negative augmentation
//! ([`idna`]) ranks a query's relevant documents, fuses them, and mines hard
//! negatives from the rest of the corpus. Dual space modeling ([`model`],
//! [`objectives`], [`training`]) trains a Siamese cross-encoder and a decoder
//! that attends to relevant and irrelevant encodings in parallel and combines
//! them as `h_self + h_rel - h_irrel`.
//!
//! Everything runs in `f64` on the CPU through a small reverse-mode tape
//! ([`autograd`]) so gradients can be checked against finite differences.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod autograd;
pub mod corpus;
pub mod decoding;
pub mod embedding;
pub mod error;
pub mod evaluation;
pub mod idna;
pub mod introspect;
pub mod model;
pub mod objectives;
pub mod training;

pub use autograd::Matrix;
pub use corpus::{Dataset, Document, QuerySample, Source, Vocabulary};
pub use embedding::{EmbeddingProvider, EmbeddingVector, TermFrequencyEmbedder};
pub use error::{Error, Result};
pub use idna::{AugmentationResult, Provenance};
pub use model::{DecoderStates, EncoderOutput, Model, ModelConfig};
pub use objectives::{LossBreakdown, LossWeights};
