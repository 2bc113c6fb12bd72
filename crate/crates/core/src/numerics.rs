//! Dense arrays and the handful of numerical kernels the pipeline is built on.
//!
//! Storage is row-major `f32`; every reduction (dot products, norms, softmax
//! denominators) accumulates in `f64`. Constructors and kernels reject
//! non-finite values so NaN/Inf cannot travel silently between stages.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RealArray {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl RealArray {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected = checked_numel(&shape)?;
        if expected != data.len() {
            return Err(Error::shape(
                "RealArray::new",
                format!("shape {shape:?} needs {expected} values, got {}", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                stage: "RealArray::new".into(),
            });
        }
        Ok(Self { shape, data })
    }

    /// Builds the output of a kernel, turning a non-finite entry into an
    /// error that names the producing stage.
    pub(crate) fn from_stage(shape: Vec<usize>, data: Vec<f32>, stage: &str) -> Result<Self> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                stage: stage.to_string(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    /// Seeded uniform entries in `[-scale, scale)`.
    pub fn uniform(shape: Vec<usize>, scale: f32, rng: &mut Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| ((rng.uniform() * 2.0 - 1.0) * scale as f64) as f32)
            .collect();
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Extent of the last axis.
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of rows once all leading axes are flattened.
    pub fn rows(&self) -> usize {
        let last = self.last_dim();
        if last == 0 {
            0
        } else {
            self.data.len() / last
        }
    }

    /// Row `i` of the array viewed as `[rows, last_dim]`.
    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.last_dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        if checked_numel(&shape)? != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        Ok(Self {
            shape,
            data: self.data,
        })
    }

    pub fn max_abs_diff(&self, other: &RealArray) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff: shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a as f64 - *b as f64).abs())
            .fold(0.0, f64::max)
    }
}

fn checked_numel(shape: &[usize]) -> Result<usize> {
    shape.iter().try_fold(1usize, |acc, &d| {
        acc.checked_mul(d)
            .ok_or_else(|| Error::ExtentOverflow(format!("shape {shape:?}")))
    })
}

/// Seeded random stream. ChaCha8 keeps the sequence identical across
/// platforms and releases for a given seed.
#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// An independent stream derived from `seed`, e.g. one per episode.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.gen()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `[lo, hi]`.
    pub fn int_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.inner.gen_range(lo..=hi)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.inner.gen_range(0..=i);
            items.swap(i, j);
        }
    }
}

/// Softmax over the positions where `valid_mask` is true. Masked positions
/// get exactly zero probability.
pub fn softmax(v: &[f64], valid_mask: &[bool]) -> Result<Vec<f64>> {
    if v.len() != valid_mask.len() {
        return Err(Error::shape(
            "softmax",
            format!("values {} vs mask {}", v.len(), valid_mask.len()),
        ));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            stage: "softmax input".into(),
        });
    }
    let max = v
        .iter()
        .zip(valid_mask)
        .filter(|(_, &m)| m)
        .map(|(x, _)| *x)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::NoValidPositions);
    }
    let mut out: Vec<f64> = v
        .iter()
        .zip(valid_mask)
        .map(|(x, &m)| if m { (x - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    Ok(out)
}

/// Softmax over the first `t_valid` entries; the tail is zero.
pub fn softmax_prefix(v: &[f64], t_valid: usize) -> Result<Vec<f64>> {
    let mask: Vec<bool> = (0..v.len()).map(|i| i < t_valid).collect();
    softmax(v, &mask)
}

/// Cosine similarity; zero when either vector has zero norm.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "cosine_similarity",
            format!("{} vs {}", a.len(), b.len()),
        ));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// `x · weight + bias`, broadcast over every leading axis of `x`.
pub fn affine(x: &RealArray, weight: &RealArray, bias: &RealArray) -> Result<RealArray> {
    if weight.rank() != 2 {
        return Err(Error::shape("affine", "weight must be rank 2"));
    }
    let (d_in, d_out) = (weight.shape()[0], weight.shape()[1]);
    if x.last_dim() != d_in || x.rank() == 0 {
        return Err(Error::shape(
            "affine",
            format!("input {:?} vs weight {:?}", x.shape(), weight.shape()),
        ));
    }
    if bias.shape() != [d_out] {
        return Err(Error::shape(
            "affine",
            format!("bias {:?} vs d_out {d_out}", bias.shape()),
        ));
    }
    let rows = x.rows();
    let w = weight.data();
    let mut out = vec![0.0f32; rows * d_out];
    let mut acc = vec![0.0f64; d_out];
    for r in 0..rows {
        acc.iter_mut()
            .zip(bias.data())
            .for_each(|(a, &b)| *a = b as f64);
        for (k, &xv) in x.row(r).iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let xv = xv as f64;
            let wrow = &w[k * d_out..(k + 1) * d_out];
            for (a, &wv) in acc.iter_mut().zip(wrow) {
                *a += xv * wv as f64;
            }
        }
        for (o, a) in out[r * d_out..(r + 1) * d_out].iter_mut().zip(&acc) {
            *o = *a as f32;
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = d_out;
    RealArray::from_stage(shape, out, "affine")
}

/// Kernel-size-1 convolution over a `[T, D_in]` sequence.
pub fn conv1x1(x: &RealArray, kernel: &RealArray) -> Result<RealArray> {
    if x.rank() != 2 || kernel.rank() != 2 || x.shape()[1] != kernel.shape()[0] {
        return Err(Error::shape(
            "conv1x1",
            format!("input {:?} vs kernel {:?}", x.shape(), kernel.shape()),
        ));
    }
    let (t, d_in, d_out) = (x.shape()[0], x.shape()[1], kernel.shape()[1]);
    let mut out = Vec::with_capacity(t * d_out);
    for step in 0..t {
        let frame = x.row(step);
        for o in 0..d_out {
            let mut acc = 0.0f64;
            for (i, &xv) in frame.iter().enumerate().take(d_in) {
                acc += xv as f64 * kernel.data()[i * d_out + o] as f64;
            }
            out.push(acc as f32);
        }
    }
    RealArray::from_stage(vec![t, d_out], out, "conv1x1")
}

/// Fixed sinusoidal position table: `pe[t, 2i] = sin(t / 10000^(2i/D))`,
/// `pe[t, 2i+1] = cos(...)`.
pub fn sinusoidal_pe(t: usize, d: usize) -> Result<RealArray> {
    if t == 0 {
        return Err(Error::InvalidArgument("positional encoding needs T >= 1".into()));
    }
    if d < 2 || d % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "positional encoding needs an even channel count >= 2, got {d}"
        )));
    }
    let mut data = Vec::with_capacity(t * d);
    for pos in 0..t {
        for i in 0..d / 2 {
            let freq = 10000f64.powf(-(2.0 * i as f64) / d as f64);
            let angle = pos as f64 * freq;
            data.push(angle.sin() as f32);
            data.push(angle.cos() as f32);
        }
    }
    RealArray::from_stage(vec![t, d], data, "sinusoidal_pe")
}

/// Row-wise layer normalization over the last axis with gain and bias.
pub(crate) fn layer_norm(x: &RealArray, gain: &[f32], bias: &[f32]) -> RealArray {
    let d = x.last_dim();
    debug_assert_eq!(gain.len(), d);
    let mut out = Vec::with_capacity(x.len());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = row
            .iter()
            .map(|&v| (v as f64 - mean).powi(2))
            .sum::<f64>()
            / d as f64;
        let inv = 1.0 / (var + 1e-5).sqrt();
        for ((&v, &g), &b) in row.iter().zip(gain).zip(bias) {
            out.push(((v as f64 - mean) * inv * g as f64 + b as f64) as f32);
        }
    }
    RealArray {
        shape: x.shape().to_vec(),
        data: out,
    }
}

pub(crate) fn relu_in_place(x: &mut RealArray) {
    for v in x.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

pub(crate) fn add(a: &RealArray, b: &RealArray, stage: &str) -> Result<RealArray> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "add",
            format!("{stage}: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    RealArray::from_stage(a.shape().to_vec(), data, stage)
}

/// Affine map with owned parameters, `weight: [d_in, d_out]`, `bias: [d_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: RealArray,
    pub bias: RealArray,
}

impl Linear {
    /// Uniform in `±1/sqrt(d_in)` with zero bias.
    pub fn init(d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        let scale = 1.0 / (d_in as f32).sqrt();
        Self {
            weight: RealArray::uniform(vec![d_in, d_out], scale, rng),
            bias: RealArray::zeros(vec![d_out]),
        }
    }

    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Self {
            weight: RealArray::zeros(vec![d_in, d_out]),
            bias: RealArray::zeros(vec![d_out]),
        }
    }

    pub fn identity(d: usize) -> Self {
        let mut weight = RealArray::zeros(vec![d, d]);
        for i in 0..d {
            weight.data_mut()[i * d + i] = 1.0;
        }
        Self {
            weight,
            bias: RealArray::zeros(vec![d]),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &RealArray) -> Result<RealArray> {
        affine(x, &self.weight, &self.bias)
    }
}
