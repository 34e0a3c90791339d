//! Autoregressive decoding with cached keys and values.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::Dropout;
use super::{Generator, ModelError};
use crate::remi::{repair, Token, TokenSequence};
use crate::tensor::{no_grad, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    /// 0 means greedy decoding.
    pub temperature: f64,
    /// Keep only the `top_k` most likely tokens; 0 keeps all.
    pub top_k: usize,
    pub max_new_tokens: usize,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self { temperature: 1.0, top_k: 0, max_new_tokens: 512 }
    }
}

/// Draws an index from `softmax(logits / temperature)` restricted to the
/// `top_k` largest logits. Temperature ≤ 0 returns the first argmax.
pub fn top_k_sample<R: Rng + ?Sized>(logits: &[f64], temperature: f64, top_k: usize, rng: &mut R) -> usize {
    let argmax = logits
        .iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > logits[best] { i } else { best });
    if temperature <= 0.0 {
        return argmax;
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    if top_k > 0 && top_k < logits.len() {
        order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
        order.truncate(top_k);
    }
    let max = logits[argmax];
    let weights: Vec<f64> = order.iter().map(|&i| ((logits[i] - max) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (k, w) in weights.iter().enumerate() {
        if u < *w {
            return order[k];
        }
        u -= w;
    }
    *order.last().expect("non-empty vocabulary")
}

struct LayerCache {
    keys: Option<Tensor>,
    values: Option<Tensor>,
    memory_keys: Tensor,
    memory_values: Tensor,
}

/// Incremental decoder: feeding tokens one at a time yields the same logits
/// as the full causal forward pass over the prefix.
pub struct DecodeState<'g> {
    gen: &'g Generator,
    caches: Vec<LayerCache>,
    len: usize,
}

impl<'g> DecodeState<'g> {
    pub fn new(gen: &'g Generator, cond: &[usize]) -> Result<Self, ModelError> {
        no_grad(|| {
            let memory = gen.encode_ids(cond, &mut Dropout::eval())?;
            let caches = gen
                .decoder
                .iter()
                .map(|l| {
                    Ok(LayerCache {
                        keys: None,
                        values: None,
                        memory_keys: l.cross_attn.k.forward(&memory)?,
                        memory_values: l.cross_attn.v.forward(&memory)?,
                    })
                })
                .collect::<Result<_, ModelError>>()?;
            Ok(Self { gen, caches, len: 0 })
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends `id` and returns the logits for the token after it.
    pub fn push(&mut self, id: usize) -> Result<Vec<f64>, ModelError> {
        no_grad(|| {
            let g = self.gen;
            let pos = g.position_row(self.len)?;
            let mut x = g.embedding.lookup(&[id])?.add(&pos)?;
            for (layer, cache) in g.decoder.iter().zip(&mut self.caches) {
                let h = layer.ln_self.forward(&x)?;
                let q = layer.self_attn.q.forward(&h)?;
                let k = layer.self_attn.k.forward(&h)?;
                let v = layer.self_attn.v.forward(&h)?;
                let keys = match &cache.keys {
                    Some(prev) => Tensor::concat(&[prev.clone(), k], 0)?,
                    None => k,
                };
                let values = match &cache.values {
                    Some(prev) => Tensor::concat(&[prev.clone(), v], 0)?,
                    None => v,
                };
                x = x.add(&layer.self_attn.attend(&q, &keys, &values, None)?)?;
                cache.keys = Some(keys);
                cache.values = Some(values);
                let h = layer.ln_cross.forward(&x)?;
                let q = layer.cross_attn.q.forward(&h)?;
                x = x.add(&layer.cross_attn.attend(&q, &cache.memory_keys, &cache.memory_values, None)?)?;
                let h = layer.ln_ff.forward(&x)?;
                x = x.add(&layer.ff.forward(&h)?)?;
            }
            self.len += 1;
            Ok(g.output.forward(&g.decoder_norm.forward(&x)?)?.to_vec())
        })
    }
}

impl Generator {
    /// Continues `cond` until `EOS`, `max_new_tokens` or the length limit.
    ///
    /// The decoder starts from `cond` without its `EOS`, so the result begins
    /// with the condition. The raw samples go through [`repair`], so the
    /// output is always grammar-valid; in the worst case it is `cond` itself.
    pub fn generate(&self, cond: &TokenSequence, sampling: &SamplingConfig, seed: u64) -> Result<TokenSequence, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cond_ids = self.ids(cond)?;
        let prefix = self.ids(&cond.without_eos())?;
        let sampled = self.sample_ids(&cond_ids, &prefix, sampling.max_new_tokens, |logits| {
            top_k_sample(logits, sampling.temperature, sampling.top_k, &mut rng)
        })?;
        let mut tokens: Vec<Token> = cond.without_eos().into_tokens();
        for id in sampled {
            tokens.push(self.vocab().token(id as u32)?);
        }
        Ok(repair(&tokens, self.vocab().config()))
    }

    /// Feeds `prefix` and then extends it with `choose(logits)` until `EOS`
    /// or a limit; returns the new ids (including a final `EOS` if drawn).
    pub fn sample_ids(
        &self,
        cond: &[usize],
        prefix: &[usize],
        max_new_tokens: usize,
        mut choose: impl FnMut(&[f64]) -> usize,
    ) -> Result<Vec<usize>, ModelError> {
        if prefix.is_empty() {
            return Err(ModelError::EmptyInput);
        }
        if prefix.len() > self.config.max_len {
            return Err(ModelError::SequenceTooLong { len: prefix.len(), max_len: self.config.max_len });
        }
        let eos = self.vocab().eos_id() as usize;
        let mut state = DecodeState::new(self, cond)?;
        let mut logits = Vec::new();
        for &id in prefix {
            logits = state.push(id)?;
        }
        let mut out = Vec::new();
        // stop before prefix + samples would exceed max_len
        while out.len() < max_new_tokens && state.len() < self.config.max_len {
            let next = choose(&logits);
            out.push(next);
            if next == eos || state.len() + 1 >= self.config.max_len {
                break;
            }
            logits = state.push(next)?;
        }
        Ok(out)
    }
}
