//! Absolute sinusoidal positions plus a learned bar-relative encoding.
//!
//! The bar-relative index of a token counts tokens since the most recent
//! `Bar` (which itself gets 0). Adding a learned row per index lets a model
//! see where inside a bar a token falls regardless of which bar it is in.

use rand::Rng;
use thiserror::Error;

use crate::remi::{Token, TokenSequence};
use crate::tensor::{Tensor, TensorError};

pub const MAX_BAR_SPAN: usize = 128;
pub const DEFAULT_SINUSOIDAL_BASE: f64 = 10_000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PositionalError {
    #[error("sequence of {len} tokens exceeds the maximum length {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Bar-relative index of every token of `seq`.
pub fn bar_relative_positions(seq: &TokenSequence) -> Vec<usize> {
    bar_relative_from_flags(seq.iter().map(|&t| t == Token::Bar))
}

/// Bar-relative indices from per-token "is a `Bar`" flags.
///
/// Tokens before the first `Bar` count up from 0 like any other bar. Indices
/// at or beyond [`MAX_BAR_SPAN`] are clamped to the last row.
pub fn bar_relative_from_flags(is_bar: impl IntoIterator<Item = bool>) -> Vec<usize> {
    let mut x = 0usize;
    let mut clamped = false;
    let out = is_bar
        .into_iter()
        .enumerate()
        .map(|(t, bar)| {
            if bar || t == 0 {
                x = 0;
            } else {
                x += 1;
            }
            if x >= MAX_BAR_SPAN {
                clamped = true;
                MAX_BAR_SPAN - 1
            } else {
                x
            }
        })
        .collect();
    if clamped {
        log::warn!("bar longer than {MAX_BAR_SPAN} tokens; clamping its relative positions");
    }
    out
}

/// Width-`d` sinusoidal code of position `t`: dimension `j` uses frequency
/// `base^(-2⌊j/2⌋/d)`, with `sin` on even and `cos` on odd dimensions.
pub fn sinusoidal_encoding(t: usize, d: usize, base: f64) -> Vec<f64> {
    (0..d)
        .map(|j| {
            let angle = t as f64 / base.powf((2 * (j / 2)) as f64 / d as f64);
            if j % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

pub fn sinusoidal_table(max_len: usize, d: usize, base: f64) -> Tensor {
    let data = (0..max_len).flat_map(|t| sinusoidal_encoding(t, d, base)).collect();
    Tensor::from_vec(&[max_len, d], data).expect("table shape")
}

/// Fixed sinusoidal rows and, when enabled, the learnable bar-relative table.
#[derive(Debug, Clone)]
pub struct PositionalTable {
    pub sinusoidal: Tensor,
    pub w_brpe: Option<Tensor>,
}

impl PositionalTable {
    pub fn new<R: Rng + ?Sized>(max_len: usize, d_model: usize, base: f64, brpe: bool, rng: &mut R) -> Self {
        let w_brpe = brpe.then(|| Tensor::randn(&[MAX_BAR_SPAN, d_model], 0.02, rng).to_param());
        Self { sinusoidal: sinusoidal_table(max_len, d_model, base), w_brpe }
    }

    pub fn max_len(&self) -> usize {
        self.sinusoidal.shape()[0]
    }

    pub fn d_model(&self) -> usize {
        self.sinusoidal.shape()[1]
    }

    /// Row `t` is the sinusoidal code of `t` plus `W_BRPE[x(t)]`, where `x`
    /// comes from `is_bar`.
    pub fn encode_flags(&self, is_bar: &[bool]) -> Result<Tensor, PositionalError> {
        let len = is_bar.len();
        if len > self.max_len() {
            return Err(PositionalError::SequenceTooLong { len, max_len: self.max_len() });
        }
        let absolute = self.sinusoidal.slice(0, 0, len)?;
        match &self.w_brpe {
            None => Ok(absolute),
            Some(w) => {
                let x = bar_relative_from_flags(is_bar.iter().copied());
                Ok(absolute.add(&w.embedding_lookup(&x)?)?)
            }
        }
    }
}

/// Positional rows for every token of `seq`.
pub fn combined_encoding(seq: &TokenSequence, table: &PositionalTable) -> Result<Tensor, PositionalError> {
    let flags: Vec<bool> = seq.iter().map(|&t| t == Token::Bar).collect();
    table.encode_flags(&flags)
}
