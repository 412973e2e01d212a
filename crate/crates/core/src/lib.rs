//! Desk-scale laboratory for retrieval-augmented language models.
//!
//! The crate covers the retriever side of joint retriever/reader training:
//! corpus chunking, a dual-encoder retriever, a versioned embedding index
//! with exact sharded search and product quantization, the reader scoring
//! contract with an analytic stand-in reader, the four retriever objectives,
//! the training loop with its index-maintenance strategies, and evaluation
//! protocols.

pub mod corpus;
pub mod error;
pub mod evalkit;
pub mod index;
pub mod io;
pub mod lm;
pub mod losses;
pub mod numeric;
pub mod retriever;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
