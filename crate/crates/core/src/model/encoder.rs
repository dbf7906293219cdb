use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{dropout, init_fan_in, init_uniform, ModelError, Rand};
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var};

const LN_EPS: f64 = 1e-5;
const EMB_INIT: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PositionEncoding {
    #[default]
    Learned,
    Sinusoidal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub model_dim: usize,
    pub feedforward_dim: usize,
    pub max_sequence_length: usize,
    pub dropout_rate: f64,
    pub position_encoding: PositionEncoding,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            n_layers: 2,
            n_heads: 4,
            model_dim: 64,
            feedforward_dim: 128,
            max_sequence_length: 128,
            dropout_rate: 0.1,
            position_encoding: PositionEncoding::Learned,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.n_heads == 0 || self.model_dim == 0 || !self.model_dim.is_multiple_of(self.n_heads)
        {
            return bad("model_dim must be a positive multiple of n_heads");
        }
        if self.feedforward_dim == 0 || self.max_sequence_length == 0 {
            return bad("feedforward_dim and max_sequence_length must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad("dropout_rate must lie in [0, 1)");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln1_gain: ParamId,
    ln1_bias: ParamId,
    ff1_w: ParamId,
    ff1_b: ParamId,
    ff2_w: ParamId,
    ff2_b: ParamId,
    ln2_gain: ParamId,
    ln2_bias: ParamId,
}

/// Transformer-style contextual encoder trained from scratch.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    vocab_size: usize,
    token_embedding: ParamId,
    position_embedding: Option<ParamId>,
    layers: Vec<Layer>,
}

/// Output of one encoder layer plus its per-head attention matrices.
pub struct LayerOutput {
    pub output: Var,
    pub attention: Vec<Var>,
}

fn sinusoidal(n: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, d]);
    for pos in 0..n {
        for i in 0..d {
            let rate = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 * rate;
            t.data_mut()[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    t
}

impl Encoder {
    pub fn new(
        config: EncoderConfig,
        vocab_size: usize,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.model_dim;
        let f = config.feedforward_dim;
        let token_embedding = store.add(
            "encoder/token_embedding",
            init_uniform(rng, &[vocab_size, d], EMB_INIT),
        );
        let position_embedding =
            (config.position_encoding == PositionEncoding::Learned).then(|| {
                store.add(
                    "encoder/position_embedding",
                    init_uniform(rng, &[config.max_sequence_length, d], EMB_INIT),
                )
            });
        let layers = (0..config.n_layers)
            .map(|l| {
                let mut add =
                    |name: &str, t: Tensor| store.add(format!("encoder/layer{l}/{name}"), t);
                Layer {
                    wq: add("attn/wq", init_fan_in(rng, d, d)),
                    bq: add("attn/bq", Tensor::zeros(&[1, d])),
                    wk: add("attn/wk", init_fan_in(rng, d, d)),
                    bk: add("attn/bk", Tensor::zeros(&[1, d])),
                    wv: add("attn/wv", init_fan_in(rng, d, d)),
                    bv: add("attn/bv", Tensor::zeros(&[1, d])),
                    wo: add("attn/wo", init_fan_in(rng, d, d)),
                    bo: add("attn/bo", Tensor::zeros(&[1, d])),
                    ln1_gain: add("ln1/gain", Tensor::full(&[1, d], 1.0)),
                    ln1_bias: add("ln1/bias", Tensor::zeros(&[1, d])),
                    ff1_w: add("ff/w1", init_fan_in(rng, d, f)),
                    ff1_b: add("ff/b1", Tensor::zeros(&[1, f])),
                    ff2_w: add("ff/w2", init_fan_in(rng, f, d)),
                    ff2_b: add("ff/b2", Tensor::zeros(&[1, d])),
                    ln2_gain: add("ln2/gain", Tensor::full(&[1, d], 1.0)),
                    ln2_bias: add("ln2/bias", Tensor::zeros(&[1, d])),
                }
            })
            .collect();
        Ok(Encoder {
            config,
            vocab_size,
            token_embedding,
            position_embedding,
            layers,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn check_ids(&self, ids: &[usize]) -> Result<(), ModelError> {
        if ids.is_empty() {
            return Err(ModelError::Empty);
        }
        if ids.len() > self.config.max_sequence_length {
            return Err(ModelError::TooLong {
                len: ids.len(),
                max: self.config.max_sequence_length,
            });
        }
        if let Some(&id) = ids.iter().find(|&&i| i >= self.vocab_size) {
            return Err(ModelError::UnknownId {
                id,
                vocab: self.vocab_size,
            });
        }
        Ok(())
    }

    /// Token embedding plus position term, `n×model_dim`.
    pub fn embed(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        ids: &[usize],
    ) -> Result<Var, ModelError> {
        self.check_ids(ids)?;
        let table = g.param(store, self.token_embedding);
        let tokens = g.gather_rows(table, ids)?;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let pos = match self.position_embedding {
            Some(id) => {
                let ptable = g.param(store, id);
                g.gather_rows(ptable, &positions)?
            }
            None => g.constant(sinusoidal(ids.len(), self.config.model_dim)),
        };
        Ok(g.add(tokens, pos)?)
    }

    fn layer_norm(
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        gain: ParamId,
        bias: ParamId,
    ) -> Result<Var, ModelError> {
        let normed = g.layer_norm_rows(x, LN_EPS)?;
        let gain = g.param(store, gain);
        let bias = g.param(store, bias);
        let scaled = g.mul_row(normed, gain)?;
        Ok(g.add_row(scaled, bias)?)
    }

    fn affine(
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        w: ParamId,
        b: ParamId,
    ) -> Result<Var, ModelError> {
        let w = g.param(store, w);
        let b = g.param(store, b);
        let xw = g.matmul(x, w)?;
        Ok(g.add_row(xw, b)?)
    }

    /// Multi-head scaled dot-product self-attention with residual and layer
    /// norm, then a ReLU feed-forward block with residual and layer norm.
    pub fn self_attention_layer(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        layer: usize,
        x: Var,
        mut rng: Rand<'_>,
    ) -> Result<LayerOutput, ModelError> {
        let p = &self.layers[layer];
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let q = Self::affine(g, store, x, p.wq, p.bq)?;
        let k = Self::affine(g, store, x, p.wk, p.bk)?;
        let v = Self::affine(g, store, x, p.wv, p.bv)?;
        let mut heads = Vec::with_capacity(self.config.n_heads);
        let mut attention = Vec::with_capacity(self.config.n_heads);
        for h in 0..self.config.n_heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = g.slice_cols(q, cols.clone())?;
            let kh = g.slice_cols(k, cols.clone())?;
            let vh = g.slice_cols(v, cols)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale);
            let weights = g.softmax_rows(scores)?;
            attention.push(weights);
            heads.push(g.matmul(weights, vh)?);
        }
        let concat = g.concat_cols(&heads)?;
        let attn_out = Self::affine(g, store, concat, p.wo, p.bo)?;
        let attn_out = dropout(g, attn_out, self.config.dropout_rate, rng.as_deref_mut())?;
        let res1 = g.add(x, attn_out)?;
        let h1 = Self::layer_norm(g, store, res1, p.ln1_gain, p.ln1_bias)?;

        let ff = Self::affine(g, store, h1, p.ff1_w, p.ff1_b)?;
        let ff = g.relu(ff);
        let ff = Self::affine(g, store, ff, p.ff2_w, p.ff2_b)?;
        let ff = dropout(g, ff, self.config.dropout_rate, rng)?;
        let res2 = g.add(h1, ff)?;
        let output = Self::layer_norm(g, store, res2, p.ln2_gain, p.ln2_bias)?;
        Ok(LayerOutput { output, attention })
    }

    /// Contextual embeddings `n×model_dim`. Dropout is active only when an
    /// rng is supplied.
    pub fn encode(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        ids: &[usize],
        mut rng: Rand<'_>,
    ) -> Result<Var, ModelError> {
        let mut x = self.embed(g, store, ids)?;
        x = dropout(g, x, self.config.dropout_rate, rng.as_deref_mut())?;
        for l in 0..self.layers.len() {
            x = self
                .self_attention_layer(g, store, l, x, rng.as_deref_mut())?
                .output;
        }
        Ok(x)
    }
}
