//! Long-context retrieval encoder laboratory.
//!
//! A bidirectional encoder built from a gated FFT long-convolution sequence
//! mixer and Monarch dimension mixers, trained with masked-language
//! pretraining over a short/long example mixture and fine-tuned with
//! contrastive objectives that work at batch size one. The retrieval side
//! covers truncation and chunk-averaging document embeddings, nDCG@10,
//! a BM25 baseline and a needle-in-a-haystack position sweep.

pub mod encoder;
pub mod error;
pub mod losses;
pub mod monarch;
pub mod numeric;
pub mod par;
pub mod retrieval;
pub mod synth;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
