//! The sequence-to-sequence generator and the per-view discriminators.

mod discriminator;
mod generator;
pub mod layers;
mod sampling;

pub use discriminator::Discriminator;
pub use generator::Generator;
pub use layers::{Dropout, NamedParams};
pub use sampling::{top_k_sample, DecodeState, SamplingConfig};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::positional::{PositionalError, DEFAULT_SINUSOIDAL_BASE};
use crate::remi::CodecError;
use crate::tensor::TensorError;
use crate::views::ViewKind;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("sequence of {len} tokens exceeds the maximum length {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("{got:?} view given to the {expected:?} discriminator")]
    ViewKindMismatch { expected: ViewKind, got: ViewKind },
    #[error("empty input sequence")]
    EmptyInput,
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

impl From<PositionalError> for ModelError {
    fn from(e: PositionalError) -> Self {
        match e {
            PositionalError::SequenceTooLong { len, max_len } => ModelError::SequenceTooLong { len, max_len },
            PositionalError::Tensor(t) => ModelError::Tensor(t),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub sinusoidal_base: f64,
    /// Adds the learned bar-relative table to the rhythm discriminator.
    pub use_brpe: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// Small enough for CI: 2 layers, 2 heads, width 32.
    pub fn toy() -> Self {
        Self {
            d_model: 32,
            n_heads: 2,
            n_layers: 2,
            d_ff: 64,
            max_len: 256,
            vocab_size: 277,
            dropout: 0.1,
            sinusoidal_base: DEFAULT_SINUSOIDAL_BASE,
            use_brpe: true,
        }
    }

    /// 6 layers, 8 heads, width 256, feed-forward 1024.
    pub fn paper() -> Self {
        Self { d_model: 256, n_heads: 8, n_layers: 6, d_ff: 1024, max_len: 1024, ..Self::toy() }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "toy" => Some(Self::toy()),
            "paper" => Some(Self::paper()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if self.d_model % 2 != 0 {
            return bad("d_model must be even");
        }
        if self.d_ff == 0 || self.max_len == 0 || self.vocab_size == 0 {
            return bad("d_ff, max_len and vocab_size must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if self.sinusoidal_base <= 1.0 {
            return bad("sinusoidal_base must exceed 1");
        }
        Ok(())
    }
}

/// Hash of the exact bit patterns of every parameter, for asserting that a
/// step left some set of weights untouched.
pub fn checksum(params: &NamedParams) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for (_, t) in params {
        for v in t.data().iter() {
            h ^= v.to_bits();
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    }
    h
}

pub fn param_count(params: &NamedParams) -> usize {
    params.iter().map(|(_, t)| t.numel()).sum()
}
