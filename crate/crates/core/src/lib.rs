//! Wait-k simultaneous translation at toy scale.
//!
//! The crate contains a small reverse-mode autodiff engine ([`tape`]), a
//! Transformer in three variants ([`model`]), the wait-k schedule and
//! latency metric ([`waitk`]), greedy streaming decoding ([`decode`]), joint
//! teacher/student training ([`training`]), evaluation ([`eval`]) and a
//! cost benchmark ([`bench`]).

pub mod bench;
pub mod cli;
pub mod config;
pub mod decode;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod tape;
pub mod tensor;
pub mod training;
pub mod vocab;
pub mod waitk;

pub use error::{Error, Result};
pub use model::{ModelConfig, Seq2Seq, Variant};
pub use tensor::Tensor;
