//! Word-level tokenizer and the tiny transformer encoder classifier.

mod encoder;
mod vocab;

pub use encoder::{argmax_rows, EncoderModel, LayerWeights, Matrix, ModelConfig, Site, LAYER_NORM_EPS, MASK_SCORE};
pub use vocab::{split_tokens, TokenizedText, Vocab, CLS, PAD, RESERVED, UNK};

pub(crate) use encoder::{encoder_forward, AdapterNodes, EncoderNodes, LowRankNodes};
