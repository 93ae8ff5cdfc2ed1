//! The encoder-decoder network, its parameters and streaming execution.

pub mod checkpoint;
mod config;
mod layers;
mod network;
mod params;
mod streaming;

pub use config::ModelConfig;
pub use layers::{DecoderLayer, EncoderLayer, FeedForward, KeyValues, LayerNorm, Linear, MultiHeadAttention};
pub use network::{
    positional_encoding, BatchOutput, EncoderOutput, IncrementalHiddenStates, PaddedBatch, Seq2Seq, Variant,
};
pub use params::{Bound, ParamId, ParamStore};
pub use streaming::{AelState, DecoderCache, EncoderCache, KvRows, StreamingSession};
