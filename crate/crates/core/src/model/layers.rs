//! Pre-LN transformer building blocks on `[len, d_model]` matrices.

use rand::{Rng, RngCore};

use crate::tensor::{Result, Tensor};

pub(crate) const LN_EPS: f64 = 1e-5;

/// Parameters collected as `(name, tensor)` pairs in a fixed order.
pub type NamedParams = Vec<(String, Tensor)>;

/// Inverted dropout driven by an optional RNG; without one it is the identity.
pub struct Dropout<'a> {
    rate: f64,
    rng: Option<&'a mut dyn RngCore>,
}

impl<'a> Dropout<'a> {
    pub fn train(rate: f64, rng: &'a mut dyn RngCore) -> Self {
        Self { rate, rng: Some(rng) }
    }

    pub fn eval() -> Dropout<'static> {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn apply(&mut self, x: &Tensor) -> Result<Tensor> {
        match self.rng.as_deref_mut() {
            Some(rng) if self.rate > 0.0 => {
                let keep = 1.0 - self.rate;
                let mask = (0..x.numel()).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
                x.dropout_with_mask(mask)
            }
            _ => Ok(x.clone()),
        }
    }
}

fn init(shape: &[usize], std: f64, rng: &mut dyn RngCore) -> Tensor {
    Tensor::randn(shape, std, rng).to_param()
}

fn constant_param(shape: &[usize], value: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::param(shape, vec![value; n]).expect("shape")
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn new(fan_in: usize, fan_out: usize, rng: &mut dyn RngCore) -> Self {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        Self { w: init(&[fan_in, fan_out], std, rng), b: constant_param(&[fan_out], 0.0) }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.w)?.add_row(&self.b)
    }

    pub fn params(&self, prefix: &str, out: &mut NamedParams) {
        out.push((format!("{prefix}.w"), self.w.clone()));
        out.push((format!("{prefix}.b"), self.b.clone()));
    }
}

/// Layer normalization with a learned gain and bias.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        Self { gain: constant_param(&[d], 1.0), bias: constant_param(&[d], 0.0) }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(LN_EPS).mul_row(&self.gain)?.add_row(&self.bias)
    }

    pub fn params(&self, prefix: &str, out: &mut NamedParams) {
        out.push((format!("{prefix}.gain"), self.gain.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// Additive mask that blocks attention from row `i` to columns `j > i`.
pub fn causal_mask(n: usize) -> Tensor {
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            d[i * n + j] = -1e30;
        }
    }
    Tensor::from_vec(&[n, n], d).expect("square")
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub n_heads: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl MultiHeadAttention {
    pub fn new(d: usize, n_heads: usize, rng: &mut dyn RngCore) -> Self {
        Self {
            n_heads,
            q: Linear::new(d, d, rng),
            k: Linear::new(d, d, rng),
            v: Linear::new(d, d, rng),
            o: Linear::new(d, d, rng),
        }
    }

    /// Attention of `queries` over `memory`, with an optional additive mask.
    pub fn forward(&self, queries: &Tensor, memory: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let q = self.q.forward(queries)?;
        let k = self.k.forward(memory)?;
        let v = self.v.forward(memory)?;
        self.attend(&q, &k, &v, mask)
    }

    /// The attention core on already-projected queries, keys and values.
    pub fn attend(&self, q: &Tensor, k: &Tensor, v: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let d = q.cols();
        let dh = d / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let (qh, kh, vh) = (q.slice(1, h * dh, (h + 1) * dh)?, k.slice(1, h * dh, (h + 1) * dh)?, v.slice(1, h * dh, (h + 1) * dh)?);
            let mut scores = qh.matmul(&kh.transpose()?)?.scale(scale);
            if let Some(m) = mask {
                scores = scores.add(m)?;
            }
            heads.push(scores.softmax(1)?.matmul(&vh)?);
        }
        self.o.forward(&Tensor::concat(&heads, 1)?)
    }

    pub fn params(&self, prefix: &str, out: &mut NamedParams) {
        self.q.params(&format!("{prefix}.q"), out);
        self.k.params(&format!("{prefix}.k"), out);
        self.v.params(&format!("{prefix}.v"), out);
        self.o.params(&format!("{prefix}.o"), out);
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(d: usize, d_ff: usize, rng: &mut dyn RngCore) -> Self {
        Self { up: Linear::new(d, d_ff, rng), down: Linear::new(d_ff, d, rng) }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.down.forward(&self.up.forward(x)?.relu())
    }

    pub fn params(&self, prefix: &str, out: &mut NamedParams) {
        self.up.params(&format!("{prefix}.up"), out);
        self.down.params(&format!("{prefix}.down"), out);
    }
}

#[derive(Debug, Clone)]
pub struct EncoderLayer {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderLayer {
    pub fn new(d: usize, n_heads: usize, d_ff: usize, rng: &mut dyn RngCore) -> Self {
        Self {
            ln_attn: LayerNorm::new(d),
            attn: MultiHeadAttention::new(d, n_heads, rng),
            ln_ff: LayerNorm::new(d),
            ff: FeedForward::new(d, d_ff, rng),
        }
    }

    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>, dropout: &mut Dropout) -> Result<Tensor> {
        let h = self.ln_attn.forward(x)?;
        let x = x.add(&dropout.apply(&self.attn.forward(&h, &h, mask)?)?)?;
        let h = self.ln_ff.forward(&x)?;
        x.add(&dropout.apply(&self.ff.forward(&h)?)?)
    }

    pub fn params(&self, prefix: &str, out: &mut NamedParams) {
        self.ln_attn.params(&format!("{prefix}.ln_attn"), out);
        self.attn.params(&format!("{prefix}.attn"), out);
        self.ln_ff.params(&format!("{prefix}.ln_ff"), out);
        self.ff.params(&format!("{prefix}.ff"), out);
    }
}

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub ln_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln_cross: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

impl DecoderLayer {
    pub fn new(d: usize, n_heads: usize, d_ff: usize, rng: &mut dyn RngCore) -> Self {
        Self {
            ln_self: LayerNorm::new(d),
            self_attn: MultiHeadAttention::new(d, n_heads, rng),
            ln_cross: LayerNorm::new(d),
            cross_attn: MultiHeadAttention::new(d, n_heads, rng),
            ln_ff: LayerNorm::new(d),
            ff: FeedForward::new(d, d_ff, rng),
        }
    }

    pub fn forward(&self, x: &Tensor, memory: &Tensor, causal: &Tensor, dropout: &mut Dropout) -> Result<Tensor> {
        let h = self.ln_self.forward(x)?;
        let x = x.add(&dropout.apply(&self.self_attn.forward(&h, &h, Some(causal))?)?)?;
        let h = self.ln_cross.forward(&x)?;
        let x = x.add(&dropout.apply(&self.cross_attn.forward(&h, memory, None)?)?)?;
        let h = self.ln_ff.forward(&x)?;
        x.add(&dropout.apply(&self.ff.forward(&h)?)?)
    }

    pub fn params(&self, prefix: &str, out: &mut NamedParams) {
        self.ln_self.params(&format!("{prefix}.ln_self"), out);
        self.self_attn.params(&format!("{prefix}.self_attn"), out);
        self.ln_cross.params(&format!("{prefix}.ln_cross"), out);
        self.cross_attn.params(&format!("{prefix}.cross_attn"), out);
        self.ln_ff.params(&format!("{prefix}.ln_ff"), out);
        self.ff.params(&format!("{prefix}.ff"), out);
    }
}

/// Token embedding table, scaled by `√d` on lookup.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: Tensor,
}

impl Embedding {
    pub fn new(vocab: usize, d: usize, rng: &mut dyn RngCore) -> Self {
        Self { table: init(&[vocab, d], 1.0 / (d as f64).sqrt(), rng) }
    }

    fn scale(&self) -> f64 {
        (self.table.cols() as f64).sqrt()
    }

    pub fn lookup(&self, ids: &[usize]) -> Result<Tensor> {
        Ok(self.table.embedding_lookup(ids)?.scale(self.scale()))
    }

    /// Embeds rows of (possibly soft) one-hot vectors: `onehot @ table`.
    pub fn mix(&self, onehot: &Tensor) -> Result<Tensor> {
        Ok(onehot.matmul(&self.table)?.scale(self.scale()))
    }

    pub fn params(&self, prefix: &str, out: &mut NamedParams) {
        out.push((format!("{prefix}.table"), self.table.clone()));
    }
}
