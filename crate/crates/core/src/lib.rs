//! Desk-scale question-answering fine-tuning toolkit.
//!
//! The crate is organized around a small reverse-mode autodiff core
//! ([`tensor`], [`tape`]) that is generic over the scalar type, a toy
//! decoder-only transformer ([`model`]), parameter-efficient adapters
//! ([`adapters`]), an AdamW training loop ([`trainer`]), beam-search
//! decoding ([`decode`]), PubMedQA-format data handling ([`corpus`]),
//! LLM-backed data augmentation ([`augment`]), and hard-match evaluation
//! ([`eval`]).
//!
//! All pipeline math runs in `f32` (see the aliases below); the generic
//! core lets tests run the same graphs in `f64` for finite-difference
//! and optimizer oracles.

pub mod adapters;
pub mod augment;
pub mod checkpoint;
pub mod corpus;
pub mod decode;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use scalar::Scalar;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Token id type shared by the tokenizer, model, and decoder.
pub type TokenId = u32;

/// Scalar type used by the training and inference pipeline.
pub type PipelineFloat = f32;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Tape32 = Tape<f32>;
pub type Tape64 = Tape<f64>;

pub type Model32 = model::ModelWeights<f32>;
