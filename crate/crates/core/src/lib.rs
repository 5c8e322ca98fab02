//! Desk-scale embedding leakage lab.
//!
//! Trains word and sentence embeddings from scratch, then measures how much
//! they leak through inversion, attribute inference and membership inference.
//! An adversarially trained encoder is included as the defense.

pub mod attribute;
pub mod corpus;
pub mod defense;
pub mod error;
pub mod harness;
pub mod inversion;
pub mod membership;
pub mod numerics;
pub mod sentence_encoder;
pub mod word_embedding;

pub use error::{Error, Result};
