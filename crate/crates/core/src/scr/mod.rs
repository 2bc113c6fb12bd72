//! Spatial-channel relation transformer.
//!
//! Query and support features each pass through spatial contextual
//! aggregation (per-frame attention over patches), inter-channel dependency
//! (channel fusion plus a residual MLP) and a pointwise reduction to
//! `d_model`. The encoder contextualizes the query; the decoder attends from
//! the encoded query to the support sequence, so its output keeps the query
//! length.

mod layers;

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use layers::{AttentionMap, DecoderLayer, DecoderMaps, EncoderLayer, FeedForward, LayerNorm, MultiHeadAttention};

use crate::container::{read_checkpoint, write_checkpoint};
use crate::episodes::{concat_support, Episode, FeatureTensor};
use crate::error::{Error, Result};
use crate::numerics::{add, dot, relu_in_place, sinusoidal_pe, softmax_prefix, Linear, RealArray, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScrConfig {
    pub n_patches: usize,
    pub channels: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_mult: usize,
    pub use_sca: bool,
    pub use_icd: bool,
    /// Temporal positional encoding added before spatial attention.
    pub sca_pe: bool,
    /// Temporal positional encoding added to the encoder input.
    pub encoder_pe: bool,
    /// Query and support streams share SCA/ICD parameters.
    pub shared_streams: bool,
    /// Initial SCA residual scale.
    pub sca_gamma: f32,
    pub init_seed: u64,
}

impl Default for ScrConfig {
    fn default() -> Self {
        Self {
            n_patches: 16,
            channels: 64,
            d_model: 64,
            heads: 4,
            layers: 2,
            ffn_mult: 4,
            use_sca: true,
            use_icd: true,
            sca_pe: true,
            encoder_pe: false,
            shared_streams: true,
            sca_gamma: 0.0,
            init_seed: 17,
        }
    }
}

impl ScrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.d_model < 2 || self.d_model % 2 != 0 || self.channels < 2 || self.channels % 2 != 0 {
            return Err(Error::Config(format!(
                "d_model {} and channels {} must be even and >= 2",
                self.d_model, self.channels
            )));
        }
        if !self.sca_gamma.is_finite() {
            return Err(Error::Config(format!("sca_gamma {} is not finite", self.sca_gamma)));
        }
        if self.n_patches == 0 || self.layers == 0 || self.ffn_mult == 0 {
            return Err(Error::Config("n_patches, layers and ffn_mult must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaParams {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    /// Residual scale, stored as a one-element array.
    pub gamma: RealArray,
}

impl ScaParams {
    pub fn init(d: usize, rng: &mut Rng) -> Self {
        Self {
            wq: Linear::init(d, d, rng),
            wk: Linear::init(d, d, rng),
            wv: Linear::init(d, d, rng),
            gamma: RealArray::zeros(vec![1]),
        }
    }

    pub fn gamma(&self) -> f32 {
        self.gamma.data()[0]
    }

    pub fn set_gamma(&mut self, gamma: f32) {
        self.gamma.data_mut()[0] = gamma;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IcdParams {
    pub fuse: Linear,
    pub lin_in: Linear,
    pub lin_out: Linear,
}

impl IcdParams {
    pub fn init(d: usize, rng: &mut Rng) -> Self {
        Self {
            fuse: Linear::init(d, d, rng),
            lin_in: Linear::init(d, d, rng),
            lin_out: Linear::init(d, d, rng),
        }
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            fuse: Linear::zeros(d, d),
            lin_in: Linear::zeros(d, d),
            lin_out: Linear::zeros(d, d),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamParams {
    pub sca: ScaParams,
    pub icd: IcdParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrtParams {
    /// Pointwise reduction from the flattened `[n, d]` plane to `d_model`.
    pub reduce: Linear,
    pub encoder: Vec<EncoderLayer>,
    pub encoder_norm: LayerNorm,
    pub decoder: Vec<DecoderLayer>,
    pub decoder_norm: LayerNorm,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScrParams {
    pub query: StreamParams,
    /// Present only when the streams do not share parameters.
    pub support: Option<StreamParams>,
    pub frt: FrtParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScrOutput {
    pub h_dec: RealArray,
}

/// Intermediate results of one forward pass, for debugging dumps.
#[derive(Clone, Debug)]
pub struct ScrTrace {
    pub query_reduced: RealArray,
    pub support_reduced: RealArray,
    pub h_enc: RealArray,
    pub encoder_maps: Vec<AttentionMap>,
    pub decoder_maps: Vec<DecoderMaps>,
    pub spatial_query: Option<RealArray>,
}

fn check_frames(x: &RealArray, d: usize, op: &'static str) -> Result<(usize, usize)> {
    match x.shape() {
        [t, n, dd] if *dd == d => Ok((*t, *n)),
        other => Err(Error::shape(op, format!("input {other:?} vs channels {d}"))),
    }
}

/// Per-frame attention over patches with a `gamma`-scaled residual.
/// Returns the output and the `[t, n, n]` attention weights.
pub fn spatial_contextual_aggregation_traced(
    x: &RealArray,
    p: &ScaParams,
    use_pe: bool,
) -> Result<(RealArray, Vec<f64>)> {
    let d = p.wq.d_in();
    let (t, n) = check_frames(x, d, "spatial_contextual_aggregation")?;
    let embedded = if use_pe {
        let pe = sinusoidal_pe(t, d)?;
        let mut data = x.data().to_vec();
        for step in 0..t {
            let pe_row = pe.row(step);
            for patch in 0..n {
                let off = (step * n + patch) * d;
                for (v, &e) in data[off..off + d].iter_mut().zip(pe_row) {
                    *v += e;
                }
            }
        }
        RealArray::from_stage(x.shape().to_vec(), data, "sca positional encoding")?
    } else {
        x.clone()
    };
    let q = p.wq.forward(&embedded)?;
    let k = p.wk.forward(&embedded)?;
    let v = p.wv.forward(&embedded)?;
    let scale = 1.0 / (d as f64).sqrt();
    let gamma = p.gamma() as f64;
    let mut out = x.data().to_vec();
    let mut attn = Vec::with_capacity(t * n * n);
    for step in 0..t {
        let base = step * n;
        for i in 0..n {
            let qi = q.row(base + i);
            let scores: Vec<f64> = (0..n).map(|j| dot(qi, k.row(base + j)) * scale).collect();
            let probs = softmax_prefix(&scores, n)?;
            let row = &mut out[(base + i) * d..(base + i + 1) * d];
            for (c, slot) in row.iter_mut().enumerate() {
                let av: f64 = probs.iter().enumerate().map(|(j, pj)| pj * v.row(base + j)[c] as f64).sum();
                *slot += (gamma * av) as f32;
            }
            attn.extend_from_slice(&probs);
        }
    }
    Ok((RealArray::from_stage(x.shape().to_vec(), out, "spatial_contextual_aggregation")?, attn))
}

pub fn spatial_contextual_aggregation(x: &RealArray, p: &ScaParams, use_pe: bool) -> Result<RealArray> {
    spatial_contextual_aggregation_traced(x, p, use_pe).map(|(out, _)| out)
}

/// Channel fusion along `d`, a ReLU MLP, and a residual. Returns the output
/// and the channel-attention term that was added to the input.
pub fn inter_channel_dependency_traced(x: &RealArray, p: &IcdParams) -> Result<(RealArray, RealArray)> {
    let d = p.fuse.d_in();
    check_frames(x, d, "inter_channel_dependency")?;
    if p.lin_in.d_in() != d || p.lin_out.d_out() != d || p.fuse.d_out() != d {
        return Err(Error::shape("inter_channel_dependency", "channel maps must be square in d"));
    }
    let fused = p.fuse.forward(x)?;
    let mut hidden = p.lin_in.forward(&fused)?;
    relu_in_place(&mut hidden);
    let term = p.lin_out.forward(&hidden)?;
    let out = add(x, &term, "inter_channel_dependency")?;
    Ok((out, term))
}

pub fn inter_channel_dependency(x: &RealArray, p: &IcdParams) -> Result<RealArray> {
    inter_channel_dependency_traced(x, p).map(|(out, _)| out)
}

/// Flattens each `[n, d]` frame and maps it to `d_model` pointwise in time.
pub fn reduce_spatial(x: &RealArray, reduce: &Linear) -> Result<RealArray> {
    let [t, n, d] = x.shape() else {
        return Err(Error::shape("reduce_spatial", format!("expected rank 3, got {:?}", x.shape())));
    };
    if n * d != reduce.d_in() {
        return Err(Error::shape(
            "reduce_spatial",
            format!("frame {n}x{d} vs reduction input {}", reduce.d_in()),
        ));
    }
    let flat = x.clone().reshape(vec![*t, n * d])?;
    reduce.forward(&flat)
}

fn add_positional(x: &RealArray) -> Result<RealArray> {
    let pe = sinusoidal_pe(x.rows(), x.last_dim())?;
    add(x, &pe, "encoder positional encoding")
}

pub fn encode_traced(x: &RealArray, p: &FrtParams, use_pe: bool) -> Result<(RealArray, Vec<AttentionMap>)> {
    if x.rank() != 2 || x.last_dim() != p.reduce.d_out() {
        return Err(Error::shape("encode", format!("input {:?}", x.shape())));
    }
    let mut h = if use_pe { add_positional(x)? } else { x.clone() };
    let mut maps = Vec::with_capacity(p.encoder.len());
    for (i, layer) in p.encoder.iter().enumerate() {
        let (next, map) = layer.forward(&h, &format!("encoder layer {i}"))?;
        h = next;
        maps.push(map);
    }
    let out = p.encoder_norm.forward(&h);
    let out = RealArray::from_stage(out.shape().to_vec(), out.into_data(), "encoder output norm")?;
    Ok((out, maps))
}

pub fn encode(x: &RealArray, p: &FrtParams, use_pe: bool) -> Result<RealArray> {
    encode_traced(x, p, use_pe).map(|(out, _)| out)
}

pub fn decode_traced(h_enc: &RealArray, y: &RealArray, p: &FrtParams) -> Result<(ScrOutput, Vec<DecoderMaps>)> {
    let d_model = p.reduce.d_out();
    if h_enc.rank() != 2 || y.rank() != 2 || h_enc.last_dim() != d_model || y.last_dim() != d_model {
        return Err(Error::shape(
            "decode",
            format!("target {:?}, memory {:?}, d_model {d_model}", h_enc.shape(), y.shape()),
        ));
    }
    let mut h = h_enc.clone();
    let mut maps = Vec::with_capacity(p.decoder.len());
    for (i, layer) in p.decoder.iter().enumerate() {
        let (next, m) = layer.forward(&h, y, &format!("decoder layer {i}"))?;
        h = next;
        maps.push(m);
    }
    let out = p.decoder_norm.forward(&h);
    let h_dec = RealArray::from_stage(out.shape().to_vec(), out.into_data(), "decoder output norm")?;
    Ok((ScrOutput { h_dec }, maps))
}

pub fn decode(h_enc: &RealArray, y: &RealArray, p: &FrtParams) -> Result<ScrOutput> {
    decode_traced(h_enc, y, p).map(|(out, _)| out)
}

/// Frozen transformer: configuration plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ScrModel {
    pub config: ScrConfig,
    pub params: ScrParams,
}

impl ScrModel {
    pub fn init(config: &ScrConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.init_seed);
        let (d, dm) = (config.channels, config.d_model);
        let stream = |rng: &mut Rng| {
            let mut sca = ScaParams::init(d, rng);
            sca.set_gamma(config.sca_gamma);
            StreamParams {
                sca,
                icd: IcdParams::init(d, rng),
            }
        };
        let query = stream(&mut rng);
        let support = (!config.shared_streams).then(|| stream(&mut rng));
        let hidden = dm * config.ffn_mult;
        let frt = FrtParams {
            reduce: Linear::init(config.n_patches * d, dm, &mut rng),
            encoder: (0..config.layers)
                .map(|_| EncoderLayer::init(dm, config.heads, hidden, &mut rng))
                .collect(),
            encoder_norm: LayerNorm::new(dm),
            decoder: (0..config.layers)
                .map(|_| DecoderLayer::init(dm, config.heads, hidden, &mut rng))
                .collect(),
            decoder_norm: LayerNorm::new(dm),
        };
        Ok(Self {
            config: config.clone(),
            params: ScrParams { query, support, frt },
        })
    }

    fn stream(&self, x: &FeatureTensor, p: &StreamParams) -> Result<(RealArray, Option<RealArray>)> {
        if x.n() != self.config.n_patches || x.d() != self.config.channels {
            return Err(Error::shape(
                "scr_forward",
                format!(
                    "features [n={}, d={}] vs model [n={}, d={}]",
                    x.n(),
                    x.d(),
                    self.config.n_patches,
                    self.config.channels
                ),
            ));
        }
        let mut h = x.values().clone();
        let mut spatial = None;
        if self.config.use_sca {
            h = spatial_contextual_aggregation(&h, &p.sca, self.config.sca_pe)?;
            spatial = Some(h.clone());
        }
        if self.config.use_icd {
            h = inter_channel_dependency(&h, &p.icd)?;
        }
        Ok((reduce_spatial(&h, &self.params.frt.reduce)?, spatial))
    }

    pub fn forward_traced(&self, episode: &Episode) -> Result<(ScrOutput, ScrTrace)> {
        let (query_reduced, spatial_query) = self.stream(&episode.query, &self.params.query)?;
        let support = concat_support(&episode.support_clips())?;
        let support_params = self.params.support.as_ref().unwrap_or(&self.params.query);
        let (support_reduced, _) = self.stream(support.features(), support_params)?;
        let (h_enc, encoder_maps) = encode_traced(&query_reduced, &self.params.frt, self.config.encoder_pe)?;
        let (out, decoder_maps) = decode_traced(&h_enc, &support_reduced, &self.params.frt)?;
        Ok((
            out,
            ScrTrace {
                query_reduced,
                support_reduced,
                h_enc,
                encoder_maps,
                decoder_maps,
                spatial_query,
            },
        ))
    }

    pub fn forward(&self, episode: &Episode) -> Result<ScrOutput> {
        self.forward_traced(episode).map(|(out, _)| out)
    }

    /// Parameter arrays in checkpoint order: query stream, support stream
    /// (unshared only), reduction, encoder layers, encoder norm, decoder
    /// layers, decoder norm.
    pub fn named_arrays(&self) -> Vec<(String, RealArray)> {
        let mut copy = self.params.clone();
        slots(&mut copy)
            .into_iter()
            .map(|(name, arr)| (name, arr.clone()))
            .collect()
    }

    pub fn load_arrays(&mut self, arrays: &[(String, RealArray)]) -> Result<()> {
        let by_name: HashMap<&str, &RealArray> = arrays.iter().map(|(n, a)| (n.as_str(), a)).collect();
        for (name, slot) in slots(&mut self.params) {
            let src = by_name
                .get(name.as_str())
                .ok_or_else(|| Error::InvalidArgument(format!("checkpoint lacks {name}")))?;
            if src.shape() != slot.shape() {
                return Err(Error::shape(
                    "load checkpoint",
                    format!("{name}: {:?} vs {:?}", src.shape(), slot.shape()),
                ));
            }
            *slot = (*src).clone();
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_checkpoint(path, &self.named_arrays())
    }

    pub fn load(config: &ScrConfig, path: &Path) -> Result<Self> {
        let mut model = Self::init(config)?;
        model.load_arrays(&read_checkpoint(path)?)?;
        Ok(model)
    }
}

fn linear_slots<'a>(prefix: &str, lin: &'a mut Linear, out: &mut Vec<(String, &'a mut RealArray)>) {
    out.push((format!("{prefix}.weight"), &mut lin.weight));
    out.push((format!("{prefix}.bias"), &mut lin.bias));
}

fn norm_slots<'a>(prefix: &str, ln: &'a mut LayerNorm, out: &mut Vec<(String, &'a mut RealArray)>) {
    out.push((format!("{prefix}.gain"), &mut ln.gain));
    out.push((format!("{prefix}.bias"), &mut ln.bias));
}

fn mha_slots<'a>(prefix: &str, m: &'a mut MultiHeadAttention, out: &mut Vec<(String, &'a mut RealArray)>) {
    linear_slots(&format!("{prefix}.wq"), &mut m.wq, out);
    linear_slots(&format!("{prefix}.wk"), &mut m.wk, out);
    linear_slots(&format!("{prefix}.wv"), &mut m.wv, out);
    linear_slots(&format!("{prefix}.wo"), &mut m.wo, out);
}

fn stream_slots<'a>(prefix: &str, s: &'a mut StreamParams, out: &mut Vec<(String, &'a mut RealArray)>) {
    linear_slots(&format!("{prefix}.sca.wq"), &mut s.sca.wq, out);
    linear_slots(&format!("{prefix}.sca.wk"), &mut s.sca.wk, out);
    linear_slots(&format!("{prefix}.sca.wv"), &mut s.sca.wv, out);
    out.push((format!("{prefix}.sca.gamma"), &mut s.sca.gamma));
    linear_slots(&format!("{prefix}.icd.fuse"), &mut s.icd.fuse, out);
    linear_slots(&format!("{prefix}.icd.lin_in"), &mut s.icd.lin_in, out);
    linear_slots(&format!("{prefix}.icd.lin_out"), &mut s.icd.lin_out, out);
}

fn slots(p: &mut ScrParams) -> Vec<(String, &mut RealArray)> {
    let mut out = Vec::new();
    stream_slots("scr.query", &mut p.query, &mut out);
    if let Some(s) = p.support.as_mut() {
        stream_slots("scr.support", s, &mut out);
    }
    linear_slots("scr.reduce", &mut p.frt.reduce, &mut out);
    for (i, layer) in p.frt.encoder.iter_mut().enumerate() {
        let pre = format!("scr.encoder.{i}");
        norm_slots(&format!("{pre}.norm_attn"), &mut layer.norm_attn, &mut out);
        mha_slots(&format!("{pre}.attn"), &mut layer.attn, &mut out);
        norm_slots(&format!("{pre}.norm_ffn"), &mut layer.norm_ffn, &mut out);
        linear_slots(&format!("{pre}.ffn.w1"), &mut layer.ffn.w1, &mut out);
        linear_slots(&format!("{pre}.ffn.w2"), &mut layer.ffn.w2, &mut out);
    }
    norm_slots("scr.encoder_norm", &mut p.frt.encoder_norm, &mut out);
    for (i, layer) in p.frt.decoder.iter_mut().enumerate() {
        let pre = format!("scr.decoder.{i}");
        norm_slots(&format!("{pre}.norm_self"), &mut layer.norm_self, &mut out);
        mha_slots(&format!("{pre}.self_attn"), &mut layer.self_attn, &mut out);
        norm_slots(&format!("{pre}.norm_cross"), &mut layer.norm_cross, &mut out);
        mha_slots(&format!("{pre}.cross_attn"), &mut layer.cross_attn, &mut out);
        norm_slots(&format!("{pre}.norm_ffn"), &mut layer.norm_ffn, &mut out);
        linear_slots(&format!("{pre}.ffn.w1"), &mut layer.ffn.w1, &mut out);
        linear_slots(&format!("{pre}.ffn.w2"), &mut layer.ffn.w2, &mut out);
    }
    norm_slots("scr.decoder_norm", &mut p.frt.decoder_norm, &mut out);
    out
}
