//! Gaussian boundary labels, the composite loss with analytic gradients,
//! and a gradient-descent trainer for the boundary heads.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boundary::{mask_to_tmax, BoundaryDistributions, HeadLogits, HeadParams, MaskedSequence};
use crate::container::write_file;
use crate::episodes::{Episode, Segment};
use crate::error::{Error, Result};
use crate::numerics::Rng;
use crate::scr::ScrModel;

/// Where each Gaussian component of a label is centered.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelCenter {
    /// Start labels at segment starts, end labels at segment ends.
    #[default]
    Boundary,
    /// Both labels at segment midpoints.
    Midpoint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelConfig {
    pub sigma_pct: f64,
    pub noise_level: f64,
    pub noise_threshold: f64,
    pub epsilon: f64,
    pub smooth_window: usize,
    pub center: LabelCenter,
    /// Use this sigma for every component instead of `width * sigma_pct`.
    pub fixed_sigma: Option<f64>,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            sigma_pct: 0.1,
            noise_level: 0.01,
            noise_threshold: 0.01,
            epsilon: 1e-8,
            smooth_window: 3,
            center: LabelCenter::Boundary,
            fixed_sigma: None,
        }
    }
}

impl LabelConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.sigma_pct > 0.0
            && self.noise_level >= 0.0
            && (0.0..=1.0).contains(&self.noise_threshold)
            && self.epsilon > 0.0
            && self.smooth_window % 2 == 1
            && self.fixed_sigma.map_or(true, |s| s > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid label config {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.4,
            beta: 0.4,
            gamma: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.alpha, self.beta, self.gamma];
        if w.iter().any(|&v| !(v >= 0.0)) || ((w.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "loss weights must be non-negative and sum to 1, got {}, {}, {}",
                self.alpha, self.beta, self.gamma
            )));
        }
        Ok(())
    }

    /// Keeps the enabled terms and rescales them to sum to 1.
    pub fn restricted(&self, kl: bool, l1: bool, cls: bool) -> Result<Self> {
        let pick = |on: bool, v: f64| if on { v } else { 0.0 };
        let (a, b, c) = (pick(kl, self.alpha), pick(l1, self.beta), pick(cls, self.gamma));
        let sum = a + b + c;
        if sum <= 0.0 {
            return Err(Error::Config("at least one loss term with positive weight is required".into()));
        }
        Ok(Self {
            alpha: a / sum,
            beta: b / sum,
            gamma: c / sum,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FocalConfig {
    pub gamma: f64,
    /// Foreground weight; background positions get `1 - alpha`. `None`
    /// weights every position by 1.
    pub alpha: Option<f64>,
}

impl Default for FocalConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha: Some(0.25),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelPair {
    pub p_s: Vec<f64>,
    pub p_e: Vec<f64>,
}

fn moving_average(p: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    (0..p.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(p.len() - 1);
            p[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

/// Gaussian mixture over `0..len` with components `(mu, sigma)`, smoothed,
/// normalized, noised below the threshold and renormalized.
fn mixture_label(len: usize, mut components: Vec<(f64, f64)>, cfg: &LabelConfig, rng: &mut Rng) -> Vec<f64> {
    components.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let mut p: Vec<f64> = (0..len)
        .map(|x| {
            components
                .iter()
                .map(|&(mu, sigma)| {
                    let z = (x as f64 - mu) / sigma;
                    (-z * z / 2.0).exp()
                })
                .sum()
        })
        .collect();
    if cfg.smooth_window > 1 {
        p = moving_average(&p, cfg.smooth_window);
    }
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= total + cfg.epsilon);
    for v in p.iter_mut() {
        let noise = rng.uniform() * cfg.noise_level;
        if *v < cfg.noise_threshold {
            *v += noise;
        }
    }
    let total: f64 = p.iter().sum();
    if total > 0.0 {
        p.iter_mut().for_each(|v| *v /= total);
    } else {
        p.iter_mut().for_each(|v| *v = 1.0 / len as f64);
    }
    p
}

fn check_boundaries(len: usize, boundaries: &[(usize, usize)]) -> Result<()> {
    if len == 0 {
        return Err(Error::InvalidArgument("label length must be >= 1".into()));
    }
    for &(s, e) in boundaries {
        if s > e || e >= len {
            return Err(Error::InvalidArgument(format!(
                "boundary ({s}, {e}) outside label of length {len}"
            )));
        }
    }
    Ok(())
}

fn sigma(cfg: &LabelConfig, s: usize, e: usize) -> f64 {
    cfg.fixed_sigma.unwrap_or((e - s + 1) as f64 * cfg.sigma_pct)
}

/// One label distribution with a component per `(s, e)` pair centered at
/// its midpoint.
pub fn generate_label(len: usize, boundaries: &[(usize, usize)], cfg: &LabelConfig, rng: &mut Rng) -> Result<Vec<f64>> {
    cfg.validate()?;
    check_boundaries(len, boundaries)?;
    let comps = boundaries
        .iter()
        .map(|&(s, e)| ((s + e) as f64 / 2.0, sigma(cfg, s, e)))
        .collect();
    Ok(mixture_label(len, comps, cfg, rng))
}

/// Start and end labels for `segments` over `t_valid` steps, zero-padded
/// to `t_max`.
pub fn label_pair(t_valid: usize, t_max: usize, segments: &[Segment], cfg: &LabelConfig, rng: &mut Rng) -> Result<LabelPair> {
    if t_valid > t_max {
        return Err(Error::QueryExceedsTmax { t: t_valid, t_max });
    }
    let pairs: Vec<(usize, usize)> = segments.iter().map(|s| (s.start, s.end)).collect();
    let (mut p_s, mut p_e) = match cfg.center {
        LabelCenter::Midpoint => (
            generate_label(t_valid, &pairs, cfg, rng)?,
            generate_label(t_valid, &pairs, cfg, rng)?,
        ),
        LabelCenter::Boundary => {
            cfg.validate()?;
            check_boundaries(t_valid, &pairs)?;
            let starts = pairs.iter().map(|&(s, e)| (s as f64, sigma(cfg, s, e))).collect();
            let ends = pairs.iter().map(|&(s, e)| (e as f64, sigma(cfg, s, e))).collect();
            (mixture_label(t_valid, starts, cfg, rng), mixture_label(t_valid, ends, cfg, rng))
        }
    };
    p_s.resize(t_max, 0.0);
    p_e.resize(t_max, 0.0);
    Ok(LabelPair { p_s, p_e })
}

fn same_len(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("lengths {a} and {b}")));
    }
    Ok(())
}

pub fn kl_loss(pred: &[f64], target: &[f64], eps: f64) -> Result<f64> {
    same_len("kl_loss", pred.len(), target.len())?;
    Ok(pred
        .iter()
        .zip(target)
        .map(|(&p, &q)| if q == 0.0 { 0.0 } else { q * ((q + eps) / (p + eps)).ln() })
        .sum())
}

/// Gradient of `kl_loss(softmax(z), target)` w.r.t. `z`, given `pred = softmax(z)`.
fn kl_grad(pred: &[f64], target: &[f64], eps: f64) -> Vec<f64> {
    let r: Vec<f64> = pred.iter().zip(target).map(|(&p, &q)| q * p / (p + eps)).collect();
    let total: f64 = r.iter().sum();
    pred.iter().zip(&r).map(|(&p, &rk)| -rk + p * total).collect()
}

pub fn l1_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    same_len("l1_loss", pred.len(), target.len())?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    Ok(pred.iter().zip(target).map(|(p, q)| (p - q).abs()).sum::<f64>() / pred.len() as f64)
}

/// Subgradient sign with a dead zone around the kink.
fn sign(v: f64) -> f64 {
    if v > 1e-12 {
        1.0
    } else if v < -1e-12 {
        -1.0
    } else {
        0.0
    }
}

fn l1_grad(pred: &[f64], target: &[f64]) -> Vec<f64> {
    let n = pred.len() as f64;
    let s: Vec<f64> = pred.iter().zip(target).map(|(p, q)| sign(p - q)).collect();
    let mean: f64 = s.iter().zip(pred).map(|(s, p)| s * p).sum();
    pred.iter().zip(&s).map(|(p, sk)| p * (sk - mean) / n).collect()
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-position focal loss and its derivative w.r.t. the logit.
fn focal_term(z: f64, fg: bool, cfg: &FocalConfig) -> (f64, f64) {
    let (y, s) = if fg { (z, 1.0) } else { (-z, -1.0) };
    let alpha_t = match cfg.alpha {
        Some(a) if fg => a,
        Some(a) => 1.0 - a,
        None => 1.0,
    };
    let pt = sigmoid(y);
    let log_pt = -softplus(-y);
    let one_minus = sigmoid(-y);
    let modulator = one_minus.powf(cfg.gamma);
    let loss = -alpha_t * modulator * log_pt;
    let dy = alpha_t * (cfg.gamma * pt * modulator * log_pt - modulator * one_minus);
    (loss, s * dy)
}

/// Mean binary focal loss over the positions covered by `fg_mask`.
pub fn focal_loss(logits: &[f64], fg_mask: &[bool], cfg: &FocalConfig) -> Result<f64> {
    if logits.len() < fg_mask.len() {
        return Err(Error::shape(
            "focal_loss",
            format!("{} logits for {} mask positions", logits.len(), fg_mask.len()),
        ));
    }
    if fg_mask.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = logits.iter().zip(fg_mask).map(|(&z, &fg)| focal_term(z, fg, cfg).0).sum();
    Ok(sum / fg_mask.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub focal: FocalConfig,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub kl_start: f64,
    pub kl_end: f64,
    pub l1_start: f64,
    pub l1_end: f64,
    pub cls: f64,
}

impl LossBreakdown {
    fn add_scaled(&mut self, o: &LossBreakdown, k: f64) {
        self.total += k * o.total;
        self.kl_start += k * o.kl_start;
        self.kl_end += k * o.kl_end;
        self.l1_start += k * o.l1_start;
        self.l1_end += k * o.l1_end;
        self.cls += k * o.cls;
    }

    pub fn is_finite(&self) -> bool {
        [self.total, self.kl_start, self.kl_end, self.l1_start, self.l1_end, self.cls]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Gradients of the total loss w.r.t. the head logits over `t_max` positions.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitGrads {
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    pub cls: Vec<f64>,
}

/// Weighted sum of start/end KL, start/end L1 and focal terms, with its
/// gradient w.r.t. the logits that produced `bd`.
pub fn total_loss(
    bd: &BoundaryDistributions,
    labels: &LabelPair,
    fg_mask: &[bool],
    cfg: &LossConfig,
    eps: f64,
) -> Result<(LossBreakdown, LogitGrads)> {
    cfg.weights.validate()?;
    let (t, t_max) = (bd.t_valid, bd.t_max());
    if labels.p_s.len() != t_max || labels.p_e.len() != t_max || fg_mask.len() != t || bd.s_c.len() != t_max {
        return Err(Error::shape(
            "total_loss",
            format!(
                "t_valid {t}, t_max {t_max}, labels {}/{}, mask {}",
                labels.p_s.len(),
                labels.p_e.len(),
                fg_mask.len()
            ),
        ));
    }
    let w = cfg.weights;
    let (ps, pe) = (&bd.s_s[..t], &bd.s_e[..t]);
    let (qs, qe) = (&labels.p_s[..t], &labels.p_e[..t]);
    let mut out = LossBreakdown {
        kl_start: kl_loss(ps, qs, eps)?,
        kl_end: kl_loss(pe, qe, eps)?,
        l1_start: l1_loss(ps, qs)?,
        l1_end: l1_loss(pe, qe)?,
        cls: focal_loss(&bd.s_c, fg_mask, &cfg.focal)?,
        total: 0.0,
    };
    out.total = w.alpha * (out.kl_start + out.kl_end) + w.beta * (out.l1_start + out.l1_end) + w.gamma * out.cls;

    let boundary_grad = |p: &[f64], q: &[f64]| -> Vec<f64> {
        let mut g = vec![0.0; t_max];
        for ((slot, k), l) in g.iter_mut().zip(kl_grad(p, q, eps)).zip(l1_grad(p, q)) {
            *slot = w.alpha * k + w.beta * l;
        }
        g
    };
    let mut cls = vec![0.0; t_max];
    for (i, (&z, &fg)) in bd.s_c.iter().zip(fg_mask).enumerate() {
        cls[i] = w.gamma * focal_term(z, fg, &cfg.focal).1 / t as f64;
    }
    let grads = LogitGrads {
        start: boundary_grad(ps, qs),
        end: boundary_grad(pe, qe),
        cls,
    };
    Ok((out, grads))
}

/// Loss and gradient straight from logits.
pub fn total_loss_from_logits(
    logits: &HeadLogits,
    labels: &LabelPair,
    fg_mask: &[bool],
    cfg: &LossConfig,
    eps: f64,
) -> Result<(LossBreakdown, LogitGrads)> {
    total_loss(&BoundaryDistributions::from_logits(logits)?, labels, fg_mask, cfg, eps)
}

/// One precomputed training example: frozen decoder output plus targets.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub v: MaskedSequence,
    pub labels: LabelPair,
    pub fg_mask: Vec<bool>,
}

impl TrainSample {
    pub fn prepare(episode: &Episode, scr: &ScrModel, t_max: usize, labels: &LabelConfig, rng: &mut Rng) -> Result<Self> {
        let h = scr.forward(episode)?;
        let v = mask_to_tmax(&h.h_dec, t_max)?;
        let labels = label_pair(v.t_valid, t_max, &episode.segments(), labels, rng)?;
        Ok(Self {
            v,
            labels,
            fg_mask: episode.foreground_mask(),
        })
    }
}

/// Runs the frozen transformer over every episode; labels for episode `i`
/// use random stream `i` of `seed`.
pub fn prepare_samples(
    episodes: &[Episode],
    scr: &ScrModel,
    t_max: usize,
    labels: &LabelConfig,
    seed: u64,
) -> Result<Vec<TrainSample>> {
    episodes
        .par_iter()
        .enumerate()
        .map(|(i, ep)| TrainSample::prepare(ep, scr, t_max, labels, &mut Rng::with_stream(seed, i as u64)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub loss: LossConfig,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 0.5,
            loss: LossConfig::default(),
            epsilon: 1e-8,
        }
    }
}

type HeadGrad = [(Vec<f64>, f64); 3];

fn sample_grad(sample: &TrainSample, heads: &HeadParams, cfg: &TrainConfig) -> Result<(LossBreakdown, HeadGrad)> {
    let logits = crate::boundary::head_logits(&sample.v, heads)?;
    let (loss, g) = total_loss_from_logits(&logits, &sample.labels, &sample.fg_mask, &cfg.loss, cfg.epsilon)?;
    Ok((
        loss,
        [
            heads.phi_s.backward(&sample.v, &g.start),
            heads.phi_e.backward(&sample.v, &g.end),
            heads.phi_c.backward(&sample.v, &g.cls),
        ],
    ))
}

/// Mean loss over `samples` at `heads`, with its gradient.
pub fn batch_loss(samples: &[TrainSample], heads: &HeadParams, cfg: &TrainConfig) -> Result<(LossBreakdown, HeadGrad)> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no training samples".into()));
    }
    let parts: Vec<(LossBreakdown, HeadGrad)> = samples
        .par_iter()
        .map(|s| sample_grad(s, heads, cfg))
        .collect::<Result<_>>()?;
    let k = 1.0 / samples.len() as f64;
    let mut loss = LossBreakdown::default();
    let mut grad: HeadGrad = std::array::from_fn(|i| (vec![0.0; parts[0].1[i].0.len()], 0.0));
    for (l, g) in &parts {
        loss.add_scaled(l, k);
        for (acc, part) in grad.iter_mut().zip(g) {
            for (a, b) in acc.0.iter_mut().zip(&part.0) {
                *a += k * b;
            }
            acc.1 += k * part.1;
        }
    }
    Ok((loss, grad))
}

/// Plain gradient descent on the head parameters. The trace holds the
/// mean loss evaluated before each update.
pub fn train_heads(samples: &[TrainSample], mut heads: HeadParams, cfg: &TrainConfig) -> Result<(HeadParams, Vec<LossBreakdown>)> {
    if cfg.steps == 0 || !(cfg.lr >= 0.0) {
        return Err(Error::Config(format!("train needs steps >= 1 and lr >= 0, got {} and {}", cfg.steps, cfg.lr)));
    }
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (loss, grad) = batch_loss(samples, &heads, cfg)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step });
        }
        trace.push(loss);
        if cfg.lr > 0.0 {
            for (p, (gw, gb)) in [&mut heads.phi_s, &mut heads.phi_e, &mut heads.phi_c].into_iter().zip(&grad) {
                p.apply_step(gw, *gb, cfg.lr);
            }
            if !heads.is_finite() {
                return Err(Error::Diverged { step });
            }
        }
    }
    Ok((heads, trace))
}

/// Episode-level convenience wrapper: prepares samples then trains.
pub fn train_on_episodes(
    episodes: &[Episode],
    heads: HeadParams,
    scr: &ScrModel,
    t_max: usize,
    labels: &LabelConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(HeadParams, Vec<LossBreakdown>)> {
    let samples = prepare_samples(episodes, scr, t_max, labels, seed)?;
    train_heads(&samples, heads, cfg)
}

pub fn best_so_far(trace: &[LossBreakdown]) -> Vec<f64> {
    trace
        .iter()
        .scan(f64::INFINITY, |best, l| {
            *best = best.min(l.total);
            Some(*best)
        })
        .collect()
}

pub fn trace_csv(trace: &[LossBreakdown]) -> String {
    let mut out = String::from("step,total,kl_start,kl_end,l1_start,l1_end,cls\n");
    for (i, l) in trace.iter().enumerate() {
        let _ = writeln!(
            out,
            "{i},{},{},{},{},{},{}",
            l.total, l.kl_start, l.kl_end, l.l1_start, l.l1_end, l.cls
        );
    }
    out
}

pub fn write_trace_csv(path: &Path, trace: &[LossBreakdown]) -> Result<()> {
    write_file(path, trace_csv(trace).as_bytes())
}
