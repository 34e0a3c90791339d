use rand::RngCore;

use super::layers::{causal_mask, DecoderLayer, Dropout, Embedding, EncoderLayer, LayerNorm, Linear, NamedParams};
use super::{ModelConfig, ModelError};
use crate::positional::sinusoidal_table;
use crate::remi::{CodecConfig, TokenSequence, Vocabulary, PAD_ID};
use crate::tensor::{cross_entropy, Tensor};

/// Encoder-decoder transformer: the encoder reads the condition, the
/// decoder predicts the piece token by token under a causal mask.
#[derive(Debug, Clone)]
pub struct Generator {
    pub config: ModelConfig,
    vocab: Vocabulary,
    pub embedding: Embedding,
    pub encoder: Vec<EncoderLayer>,
    pub encoder_norm: LayerNorm,
    pub decoder: Vec<DecoderLayer>,
    pub decoder_norm: LayerNorm,
    pub output: Linear,
    positions: Tensor,
}

impl Generator {
    pub fn new(config: &ModelConfig, codec: &CodecConfig, rng: &mut dyn RngCore) -> Result<Self, ModelError> {
        config.validate()?;
        let vocab = Vocabulary::new(codec)?;
        if vocab.len() != config.vocab_size {
            return Err(ModelError::InvalidConfig(format!(
                "vocab_size {} does not match the codec vocabulary of {}",
                config.vocab_size,
                vocab.len()
            )));
        }
        let (d, h, f) = (config.d_model, config.n_heads, config.d_ff);
        Ok(Self {
            embedding: Embedding::new(config.vocab_size, d, rng),
            encoder: (0..config.n_layers).map(|_| EncoderLayer::new(d, h, f, rng)).collect(),
            encoder_norm: LayerNorm::new(d),
            decoder: (0..config.n_layers).map(|_| DecoderLayer::new(d, h, f, rng)).collect(),
            decoder_norm: LayerNorm::new(d),
            output: Linear::new(d, config.vocab_size, rng),
            positions: sinusoidal_table(config.max_len, d, config.sinusoidal_base),
            config: config.clone(),
            vocab,
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn params(&self) -> NamedParams {
        let mut out = Vec::new();
        self.embedding.params("embedding", &mut out);
        for (i, l) in self.encoder.iter().enumerate() {
            l.params(&format!("encoder.{i}"), &mut out);
        }
        self.encoder_norm.params("encoder_norm", &mut out);
        for (i, l) in self.decoder.iter().enumerate() {
            l.params(&format!("decoder.{i}"), &mut out);
        }
        self.decoder_norm.params("decoder_norm", &mut out);
        self.output.params("output", &mut out);
        out
    }

    /// Token embeddings plus sinusoidal positions for `ids`.
    pub(crate) fn embed(&self, ids: &[usize], dropout: &mut Dropout) -> Result<Tensor, ModelError> {
        if ids.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        if ids.len() > self.config.max_len {
            return Err(ModelError::SequenceTooLong { len: ids.len(), max_len: self.config.max_len });
        }
        let x = self.embedding.lookup(ids)?.add(&self.positions.slice(0, 0, ids.len())?)?;
        Ok(dropout.apply(&x)?)
    }

    pub(crate) fn position_row(&self, t: usize) -> Result<Tensor, ModelError> {
        if t >= self.config.max_len {
            return Err(ModelError::SequenceTooLong { len: t + 1, max_len: self.config.max_len });
        }
        Ok(self.positions.slice(0, t, t + 1)?)
    }

    /// Encoder output for the condition tokens.
    pub fn encode_ids(&self, cond: &[usize], dropout: &mut Dropout) -> Result<Tensor, ModelError> {
        let mut x = self.embed(cond, dropout)?;
        for layer in &self.encoder {
            x = layer.forward(&x, None, dropout)?;
        }
        Ok(self.encoder_norm.forward(&x)?)
    }

    /// Next-token logits `[prefix.len(), vocab]` given the encoder memory.
    pub fn decode_ids(&self, memory: &Tensor, prefix: &[usize], dropout: &mut Dropout) -> Result<Tensor, ModelError> {
        let mut x = self.embed(prefix, dropout)?;
        let mask = causal_mask(prefix.len());
        for layer in &self.decoder {
            x = layer.forward(&x, memory, &mask, dropout)?;
        }
        Ok(self.output.forward(&self.decoder_norm.forward(&x)?)?)
    }

    pub fn forward_ids(&self, cond: &[usize], prefix: &[usize], dropout: &mut Dropout) -> Result<Tensor, ModelError> {
        let memory = self.encode_ids(cond, dropout)?;
        self.decode_ids(&memory, prefix, dropout)
    }

    /// Logits for every prefix position, evaluation mode. Row `n` scores the
    /// token that follows `target_prefix[..=n]`.
    pub fn forward(&self, cond: &TokenSequence, target_prefix: &TokenSequence) -> Result<Tensor, ModelError> {
        let c = self.ids(cond)?;
        let p = self.ids(target_prefix)?;
        self.forward_ids(&c, &p, &mut Dropout::eval())
    }

    /// Teacher-forced mean next-token negative log-likelihood of `target`.
    pub fn nll_ids(&self, cond: &[usize], target: &[usize], dropout: &mut Dropout) -> Result<Tensor, ModelError> {
        if target.len() < 2 {
            return Err(ModelError::EmptyInput);
        }
        let logits = self.forward_ids(cond, &target[..target.len() - 1], dropout)?;
        Ok(cross_entropy(&logits, &target[1..], PAD_ID as usize)?)
    }

    pub fn nll(&self, cond: &TokenSequence, target: &TokenSequence) -> Result<Tensor, ModelError> {
        let c = self.ids(cond)?;
        let t = self.ids(target)?;
        self.nll_ids(&c, &t, &mut Dropout::eval())
    }

    pub(crate) fn ids(&self, seq: &TokenSequence) -> Result<Vec<usize>, ModelError> {
        Ok(self.vocab.encode_ids(seq)?.into_iter().map(|i| i as usize).collect())
    }
}
