//! Pre-norm transformer blocks used by the encoder/decoder.

use crate::error::{Error, Result};
use crate::numerics::{add, dot, layer_norm, relu_in_place, softmax_prefix, Linear, RealArray, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gain: RealArray,
    pub bias: RealArray,
}

impl LayerNorm {
    pub fn new(d: usize) -> Self {
        Self {
            gain: RealArray::filled(vec![d], 1.0),
            bias: RealArray::zeros(vec![d]),
        }
    }

    pub fn forward(&self, x: &RealArray) -> RealArray {
        layer_norm(x, self.gain.data(), self.bias.data())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

/// Attention weights of one call, `[heads, queries, keys]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub heads: usize,
    pub queries: usize,
    pub keys: usize,
    pub weights: Vec<f64>,
}

impl AttentionMap {
    pub fn row(&self, head: usize, query: usize) -> &[f64] {
        let start = (head * self.queries + query) * self.keys;
        &self.weights[start..start + self.keys]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.weights.chunks(self.keys.max(1))
    }
}

impl MultiHeadAttention {
    pub fn init(d_model: usize, heads: usize, rng: &mut Rng) -> Self {
        Self {
            heads,
            wq: Linear::init(d_model, d_model, rng),
            wk: Linear::init(d_model, d_model, rng),
            wv: Linear::init(d_model, d_model, rng),
            wo: Linear::init(d_model, d_model, rng),
        }
    }

    /// Scaled dot-product attention of `queries` over `keys_values`.
    pub fn forward(&self, queries: &RealArray, keys_values: &RealArray) -> Result<(RealArray, AttentionMap)> {
        let d_model = self.wq.d_in();
        if queries.last_dim() != d_model || keys_values.last_dim() != d_model {
            return Err(Error::shape(
                "attention",
                format!(
                    "queries {:?}, keys {:?}, d_model {d_model}",
                    queries.shape(),
                    keys_values.shape()
                ),
            ));
        }
        let q = self.wq.forward(queries)?;
        let k = self.wk.forward(keys_values)?;
        let v = self.wv.forward(keys_values)?;
        let (tq, tk) = (q.rows(), k.rows());
        let dh = d_model / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut weights = Vec::with_capacity(self.heads * tq * tk);
        let mut mixed = vec![0.0f32; tq * d_model];
        for h in 0..self.heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..tq {
                let qi = &q.row(i)[cols.clone()];
                let scores: Vec<f64> = (0..tk).map(|j| dot(qi, &k.row(j)[cols.clone()]) * scale).collect();
                let probs = softmax_prefix(&scores, tk)?;
                let out = &mut mixed[i * d_model + h * dh..i * d_model + (h + 1) * dh];
                for (c, slot) in out.iter_mut().enumerate() {
                    let acc: f64 = probs
                        .iter()
                        .enumerate()
                        .map(|(j, p)| p * v.row(j)[h * dh + c] as f64)
                        .sum();
                    *slot = acc as f32;
                }
                weights.extend_from_slice(&probs);
            }
        }
        let mixed = RealArray::from_stage(vec![tq, d_model], mixed, "attention")?;
        let out = self.wo.forward(&mixed)?;
        Ok((
            out,
            AttentionMap {
                heads: self.heads,
                queries: tq,
                keys: tk,
                weights,
            },
        ))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward {
    pub w1: Linear,
    pub w2: Linear,
}

impl FeedForward {
    pub fn init(d_model: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            w1: Linear::init(d_model, hidden, rng),
            w2: Linear::init(hidden, d_model, rng),
        }
    }

    pub fn forward(&self, x: &RealArray) -> Result<RealArray> {
        let mut h = self.w1.forward(x)?;
        relu_in_place(&mut h);
        self.w2.forward(&h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub norm_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderLayer {
    pub fn init(d_model: usize, heads: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            norm_attn: LayerNorm::new(d_model),
            attn: MultiHeadAttention::init(d_model, heads, rng),
            norm_ffn: LayerNorm::new(d_model),
            ffn: FeedForward::init(d_model, hidden, rng),
        }
    }

    pub fn forward(&self, x: &RealArray, stage: &str) -> Result<(RealArray, AttentionMap)> {
        let normed = self.norm_attn.forward(x);
        let (attn, map) = self.attn.forward(&normed, &normed)?;
        let x = add(x, &attn, stage)?;
        let ffn = self.ffn.forward(&self.norm_ffn.forward(&x))?;
        Ok((add(&x, &ffn, stage)?, map))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer {
    pub norm_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub norm_cross: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm_ffn: LayerNorm,
    pub ffn: FeedForward,
}

/// Attention maps produced by one decoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderMaps {
    pub self_attn: AttentionMap,
    pub cross_attn: AttentionMap,
}

impl DecoderLayer {
    pub fn init(d_model: usize, heads: usize, hidden: usize, rng: &mut Rng) -> Self {
        Self {
            norm_self: LayerNorm::new(d_model),
            self_attn: MultiHeadAttention::init(d_model, heads, rng),
            norm_cross: LayerNorm::new(d_model),
            cross_attn: MultiHeadAttention::init(d_model, heads, rng),
            norm_ffn: LayerNorm::new(d_model),
            ffn: FeedForward::init(d_model, hidden, rng),
        }
    }

    /// `target` attends to itself, then to `memory`.
    pub fn forward(&self, target: &RealArray, memory: &RealArray, stage: &str) -> Result<(RealArray, DecoderMaps)> {
        let normed = self.norm_self.forward(target);
        let (sa, self_map) = self.self_attn.forward(&normed, &normed)?;
        let x = add(target, &sa, stage)?;
        let (ca, cross_map) = self.cross_attn.forward(&self.norm_cross.forward(&x), memory)?;
        let x = add(&x, &ca, stage)?;
        let ffn = self.ffn.forward(&self.norm_ffn.forward(&x))?;
        Ok((
            add(&x, &ffn, stage)?,
            DecoderMaps {
                self_attn: self_map,
                cross_attn: cross_map,
            },
        ))
    }
}
