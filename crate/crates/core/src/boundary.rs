//! Masked boundary regression heads and selective cosine penalization.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{read_file, write_file};
use crate::episodes::FeatureTensor;
use crate::error::{Error, Result};
use crate::numerics::{cosine_similarity, softmax_prefix, RealArray, Rng};

/// Decoded query features zero-padded to `t_max` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedSequence {
    pub v: RealArray,
    pub t_valid: usize,
    pub t_max: usize,
}

impl MaskedSequence {
    pub fn d_model(&self) -> usize {
        self.v.last_dim()
    }

    pub fn row(&self, t: usize) -> &[f32] {
        self.v.row(t)
    }
}

pub fn mask_to_tmax(h_dec: &RealArray, t_max: usize) -> Result<MaskedSequence> {
    let [t, d] = h_dec.shape() else {
        return Err(Error::shape("mask_to_tmax", format!("expected rank 2, got {:?}", h_dec.shape())));
    };
    let (t, d) = (*t, *d);
    if t > t_max {
        return Err(Error::QueryExceedsTmax { t, t_max });
    }
    let mut data = vec![0.0f32; t_max * d];
    data[..t * d].copy_from_slice(h_dec.data());
    Ok(MaskedSequence {
        v: RealArray::new(vec![t_max, d], data)?,
        t_valid: t,
        t_max,
    })
}

/// One projection head. With `window == 1` this is an affine map
/// `d_model -> 1` applied per timestep; wider windows read the
/// neighbouring rows `t - window/2 ..= t + window/2` (zero outside).
/// The windowed sum is scaled by `1/sqrt(window)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    /// `[window, d_model]`
    pub weight: RealArray,
    /// `[1]`
    pub bias: RealArray,
}

impl Projection {
    pub fn init(window: usize, d_model: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (d_model as f32).sqrt();
        Self {
            weight: RealArray::uniform(vec![window, d_model], bound, rng),
            bias: RealArray::zeros(vec![1]),
        }
    }

    pub fn window(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_model(&self) -> usize {
        self.weight.shape()[1]
    }

    fn input_scale(&self) -> f64 {
        1.0 / (self.window() as f64).sqrt()
    }

    /// Logits at every one of the `t_max` positions.
    pub fn logits(&self, v: &MaskedSequence) -> Result<Vec<f64>> {
        if v.d_model() != self.d_model() {
            return Err(Error::shape(
                "boundary head",
                format!("features have d_model {}, head expects {}", v.d_model(), self.d_model()),
            ));
        }
        let (window, half, scale) = (self.window(), self.window() / 2, self.input_scale());
        let bias = self.bias.data()[0] as f64;
        let out = (0..v.t_max)
            .map(|t| {
                let mut acc = 0.0;
                for k in 0..window {
                    if let Some(src) = (t + k).checked_sub(half).filter(|&s| s < v.t_max) {
                        acc += v
                            .row(src)
                            .iter()
                            .zip(self.weight.row(k))
                            .map(|(&a, &b)| a as f64 * b as f64)
                            .sum::<f64>();
                    }
                }
                bias + scale * acc
            })
            .collect();
        Ok(out)
    }

    /// Gradient of a loss w.r.t. `weight` and `bias`, given its gradient
    /// w.r.t. the logits.
    pub fn backward(&self, v: &MaskedSequence, grad_logits: &[f64]) -> (Vec<f64>, f64) {
        let (window, half, d) = (self.window(), self.window() / 2, self.d_model());
        let scale = self.input_scale();
        let mut gw = vec![0.0; window * d];
        let mut gb = 0.0;
        for (t, &g) in grad_logits.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            gb += g;
            let g = g * scale;
            for k in 0..window {
                if let Some(src) = (t + k).checked_sub(half).filter(|&s| s < v.t_max) {
                    for (slot, &x) in gw[k * d..(k + 1) * d].iter_mut().zip(v.row(src)) {
                        *slot += g * x as f64;
                    }
                }
            }
        }
        (gw, gb)
    }

    pub(crate) fn apply_step(&mut self, gw: &[f64], gb: f64, lr: f64) {
        for (w, g) in self.weight.data_mut().iter_mut().zip(gw) {
            *w = (*w as f64 - lr * g) as f32;
        }
        let b = &mut self.bias.data_mut()[0];
        *b = (*b as f64 - lr * gb) as f32;
    }

    fn is_finite(&self) -> bool {
        self.weight.data().iter().chain(self.bias.data()).all(|v| v.is_finite())
    }
}

/// Start, end and foreground heads.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    pub phi_s: Projection,
    pub phi_e: Projection,
    pub phi_c: Projection,
}

impl HeadParams {
    pub fn init(d_model: usize, window: usize, seed: u64) -> Result<Self> {
        if window == 0 || window % 2 == 0 {
            return Err(Error::Config(format!("head window must be odd, got {window}")));
        }
        let mut rng = Rng::new(seed);
        Ok(Self {
            phi_s: Projection::init(window, d_model, &mut rng),
            phi_e: Projection::init(window, d_model, &mut rng),
            phi_c: Projection::init(window, d_model, &mut rng),
        })
    }

    pub fn d_model(&self) -> usize {
        self.phi_s.d_model()
    }

    pub fn window(&self) -> usize {
        self.phi_s.window()
    }

    pub fn is_finite(&self) -> bool {
        self.phi_s.is_finite() && self.phi_e.is_finite() && self.phi_c.is_finite()
    }

    pub fn named_arrays(&self) -> Vec<(String, RealArray)> {
        let mut out = Vec::with_capacity(6);
        for (name, p) in [("heads.phi_s", &self.phi_s), ("heads.phi_e", &self.phi_e), ("heads.phi_c", &self.phi_c)] {
            out.push((format!("{name}.weight"), p.weight.clone()));
            out.push((format!("{name}.bias"), p.bias.clone()));
        }
        out
    }

    pub fn from_named(arrays: &[(String, RealArray)]) -> Result<Self> {
        let find = |name: &str| -> Result<RealArray> {
            arrays
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, a)| a.clone())
                .ok_or_else(|| Error::InvalidArgument(format!("checkpoint lacks {name}")))
        };
        let proj = |name: &str| -> Result<Projection> {
            let weight = find(&format!("{name}.weight"))?;
            let bias = find(&format!("{name}.bias"))?;
            if weight.rank() != 2 || bias.shape() != [1] {
                return Err(Error::shape(
                    "load heads",
                    format!("{name}: weight {:?}, bias {:?}", weight.shape(), bias.shape()),
                ));
            }
            Ok(Projection { weight, bias })
        };
        let heads = Self {
            phi_s: proj("heads.phi_s")?,
            phi_e: proj("heads.phi_e")?,
            phi_c: proj("heads.phi_c")?,
        };
        if heads.phi_e.weight.shape() != heads.phi_s.weight.shape()
            || heads.phi_c.weight.shape() != heads.phi_s.weight.shape()
        {
            return Err(Error::shape("load heads", "head weights disagree in shape"));
        }
        Ok(heads)
    }
}

/// Raw head outputs over `t_max` positions.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadLogits {
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    pub cls: Vec<f64>,
    pub t_valid: usize,
}

pub fn head_logits(v: &MaskedSequence, p: &HeadParams) -> Result<HeadLogits> {
    Ok(HeadLogits {
        start: p.phi_s.logits(v)?,
        end: p.phi_e.logits(v)?,
        cls: p.phi_c.logits(v)?,
        t_valid: v.t_valid,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundaryDistributions {
    #[serde(rename = "start")]
    pub s_s: Vec<f64>,
    #[serde(rename = "end")]
    pub s_e: Vec<f64>,
    #[serde(rename = "cls")]
    pub s_c: Vec<f64>,
    pub t_valid: usize,
}

impl BoundaryDistributions {
    /// Softmax over the valid prefix of the start/end logits.
    pub fn from_logits(logits: &HeadLogits) -> Result<Self> {
        if logits.t_valid == 0 {
            return Err(Error::NoValidPositions);
        }
        let out = Self {
            s_s: softmax_prefix(&logits.start, logits.t_valid)?,
            s_e: softmax_prefix(&logits.end, logits.t_valid)?,
            s_c: logits.cls.clone(),
            t_valid: logits.t_valid,
        };
        if out.s_s.iter().chain(&out.s_e).chain(&out.s_c).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                stage: "boundary scores".into(),
            });
        }
        Ok(out)
    }

    pub fn t_max(&self) -> usize {
        self.s_s.len()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string(self)?;
        text.push('\n');
        write_file(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bd: Self = serde_json::from_slice(&read_file(path)?)?;
        if bd.s_e.len() != bd.s_s.len() || bd.s_c.len() != bd.s_s.len() || bd.t_valid > bd.s_s.len() {
            return Err(Error::InvalidArgument(format!(
                "{}: inconsistent lengths in probability dump",
                path.display()
            )));
        }
        Ok(bd)
    }
}

pub fn boundary_scores(v: &MaskedSequence, p: &HeadParams) -> Result<BoundaryDistributions> {
    BoundaryDistributions::from_logits(&head_logits(v, p)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScpConfig {
    pub offset: usize,
    pub top_m: usize,
}

impl Default for ScpConfig {
    fn default() -> Self {
        Self { offset: 4, top_m: 100 }
    }
}

/// Indices of the `top_m` largest entries of `p[..t_valid]`, ties to the
/// smaller index.
fn top_candidates(p: &[f64], t_valid: usize, top_m: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..t_valid.min(p.len())).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    idx.truncate(top_m);
    idx
}

/// Similarities within this (relative) distance of the mean count as equal.
const SIM_TOLERANCE: f64 = 1e-12;

fn penalize(
    p: &[f64],
    qf: &FeatureTensor,
    top_m: usize,
    partner: impl Fn(usize) -> Option<usize>,
) -> Result<Vec<f64>> {
    let mut sims = Vec::new();
    for i in top_candidates(p, qf.t(), top_m) {
        if let Some(j) = partner(i) {
            sims.push((i, cosine_similarity(qf.frame(i), qf.frame(j))?));
        }
    }
    let mut out = p.to_vec();
    if sims.is_empty() {
        return Ok(out);
    }
    let mean = sims.iter().map(|(_, s)| s).sum::<f64>() / sims.len() as f64;
    let cut = mean - SIM_TOLERANCE * mean.abs().max(1.0);
    for (i, s) in sims {
        if s < cut {
            out[i] = p[i] / 2.0;
        }
    }
    Ok(out)
}

/// Halves candidate start (end) probabilities whose frame is less similar
/// to the frame `offset` steps before (after) it than the candidate mean.
pub fn scp_refine(sp: &[f64], ep: &[f64], qf: &FeatureTensor, cfg: &ScpConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    let t = qf.t();
    if sp.len() < t || ep.len() < t {
        return Err(Error::shape(
            "scp_refine",
            format!("distributions of length {}/{} for {t} query steps", sp.len(), ep.len()),
        ));
    }
    let off = cfg.offset;
    let starts = penalize(sp, qf, cfg.top_m, |i| i.checked_sub(off))?;
    let ends = penalize(ep, qf, cfg.top_m, |i| Some(i + off).filter(|&j| j < t))?;
    Ok((starts, ends))
}

/// Applies [`scp_refine`] to the start/end distributions of `bd`.
pub fn refine_distributions(bd: &BoundaryDistributions, qf: &FeatureTensor, cfg: &ScpConfig) -> Result<BoundaryDistributions> {
    if qf.t() != bd.t_valid {
        return Err(Error::shape(
            "scp_refine",
            format!("query has {} steps, distributions {} valid", qf.t(), bd.t_valid),
        ));
    }
    let (s_s, s_e) = scp_refine(&bd.s_s, &bd.s_e, qf, cfg)?;
    Ok(BoundaryDistributions {
        s_s,
        s_e,
        s_c: bd.s_c.clone(),
        t_valid: bd.t_valid,
    })
}
