//! Small-scale retrieval-augmented language modeling.
//!
//! A chunk-level key/value retrieval database over an IVF vector index feeds
//! a decoder transformer with chunked cross-attention. The crate also carries
//! the noise regularizers for the retrieved memory, a noisy-retrieval
//! simulator and the evaluation protocols (sliding-window perplexity,
//! plug-and-play domain shift, fine-tuning, leakage analysis, generation).

pub mod codec;
pub mod corpus;
pub mod embed;
pub mod error;
pub mod eval;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod ivf;
pub mod model;
pub mod noise;
pub mod optim;
pub mod par;
pub mod retrodb;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
