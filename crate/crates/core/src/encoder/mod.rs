//! Long-convolution encoder, byte tokenizer and checkpoint IO.

mod checkpoint;
mod model;
mod tokenizer;

pub use model::{extend_positions, EncoderConfig, EncoderModel, LAYER_NORM_EPS};
pub use tokenizer::{ByteTokenizer, Vocab, BYTE_VOCAB_SIZE};
pub use checkpoint::{from_bytes, load, save, to_bytes};
