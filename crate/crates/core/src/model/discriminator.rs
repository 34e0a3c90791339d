use rand::RngCore;

use super::layers::{Dropout, Embedding, EncoderLayer, LayerNorm, Linear, NamedParams};
use super::{ModelConfig, ModelError};
use crate::positional::PositionalTable;
use crate::remi::{CodecConfig, Token, TokenSequence, Vocabulary};
use crate::tensor::Tensor;
use crate::views::{DecoupledView, ViewKind};

/// Encoder-only classifier over one decoupled view. The rhythm variant adds
/// the learned bar-relative positions when `use_brpe` is set.
///
/// The sequence is mean-pooled after the last layer and projected to a
/// single logit; `σ(logit)` is the probability that the view is real.
#[derive(Debug, Clone)]
pub struct Discriminator {
    pub config: ModelConfig,
    pub kind: ViewKind,
    vocab: Vocabulary,
    pub embedding: Embedding,
    pub positions: PositionalTable,
    pub layers: Vec<EncoderLayer>,
    pub norm: LayerNorm,
    pub head: Linear,
}

impl Discriminator {
    pub fn new(config: &ModelConfig, codec: &CodecConfig, kind: ViewKind, rng: &mut dyn RngCore) -> Result<Self, ModelError> {
        config.validate()?;
        let vocab = Vocabulary::new(codec)?;
        if vocab.len() != config.vocab_size {
            return Err(ModelError::InvalidConfig(format!(
                "vocab_size {} does not match the codec vocabulary of {}",
                config.vocab_size,
                vocab.len()
            )));
        }
        let d = config.d_model;
        let brpe = config.use_brpe && kind == ViewKind::Rhythm;
        Ok(Self {
            embedding: Embedding::new(config.vocab_size, d, rng),
            positions: PositionalTable::new(config.max_len, d, config.sinusoidal_base, brpe, rng),
            layers: (0..config.n_layers).map(|_| EncoderLayer::new(d, config.n_heads, config.d_ff, rng)).collect(),
            norm: LayerNorm::new(d),
            head: Linear::new(d, 1, rng),
            config: config.clone(),
            kind,
            vocab,
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> NamedParams {
        let mut out = Vec::new();
        self.embedding.params("embedding", &mut out);
        if let Some(w) = &self.positions.w_brpe {
            out.push(("w_brpe".to_string(), w.clone()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            l.params(&format!("layers.{i}"), &mut out);
        }
        self.norm.params("norm", &mut out);
        self.head.params("head", &mut out);
        out
    }

    /// Logit (`[1, 1]`) for a view, evaluation mode.
    pub fn forward(&self, view: &DecoupledView) -> Result<Tensor, ModelError> {
        if view.kind != self.kind {
            return Err(ModelError::ViewKindMismatch { expected: self.kind, got: view.kind });
        }
        let ids = self.ids(&view.seq)?;
        self.forward_ids(&ids, &mut Dropout::eval())
    }

    pub fn forward_ids(&self, ids: &[usize], dropout: &mut Dropout) -> Result<Tensor, ModelError> {
        if ids.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        let bar = self.vocab.bar_id() as usize;
        let is_bar: Vec<bool> = ids.iter().map(|&i| i == bar).collect();
        let x = self.embedding.table.embedding_lookup(ids)?;
        self.classify(x, &is_bar, dropout)
    }

    /// Logit for rows of (soft) one-hot token vectors `[len, vocab]`, so
    /// gradients can reach whatever produced the rows. `is_bar` marks rows
    /// that stand for `Bar` tokens.
    pub fn forward_onehot(&self, onehot: &Tensor, is_bar: &[bool], dropout: &mut Dropout) -> Result<Tensor, ModelError> {
        if onehot.rows() == 0 {
            return Err(ModelError::EmptyInput);
        }
        let x = onehot.matmul(&self.embedding.table)?;
        self.classify(x, is_bar, dropout)
    }

    fn classify(&self, raw_embedding: Tensor, is_bar: &[bool], dropout: &mut Dropout) -> Result<Tensor, ModelError> {
        let scale = (self.config.d_model as f64).sqrt();
        let x = raw_embedding.scale(scale).add(&self.positions.encode_flags(is_bar)?)?;
        let mut x = dropout.apply(&x)?;
        for layer in &self.layers {
            x = layer.forward(&x, None, dropout)?;
        }
        let pooled = self.norm.forward(&x)?.mean_rows()?;
        Ok(self.head.forward(&pooled)?)
    }

    pub(crate) fn ids(&self, seq: &TokenSequence) -> Result<Vec<usize>, ModelError> {
        Ok(self.vocab.encode_ids(seq)?.into_iter().map(|i| i as usize).collect())
    }

    pub fn is_bar(&self, seq: &TokenSequence) -> Vec<bool> {
        seq.iter().map(|&t| t == Token::Bar).collect()
    }
}
