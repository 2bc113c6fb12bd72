//! Episode data model and the deterministic synthetic feature generator.
//!
//! One timestep is one second of video, so segment bounds are integer
//! timestep indices with an inclusive end.

mod dataset;
mod io;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use dataset::{
    sample_episodes, split_classes, ClassSplit, Dataset, EpisodeRef, GenSpec, Manifest, Split,
    SupportRef, VideoRecord,
};
pub use io::{read_annotations, read_features, write_annotations, write_features, AnnotatedSegment, AnnotationDoc, VideoAnnotation};

use crate::error::{Error, Result};
use crate::numerics::{RealArray, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClassId(pub u32);

impl ClassId {
    /// Name used in annotation and prediction files.
    pub fn name(self) -> String {
        format!("class_{:03}", self.0)
    }

    pub fn parse(name: &str) -> Option<Self> {
        let digits = name.strip_prefix("class_")?;
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        digits.parse().ok().map(ClassId)
    }
}

impl fmt::Display for ClassId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// `[t, n, d]` clip features: `t` one-second steps, `n` patches, `d` channels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTensor {
    values: RealArray,
}

impl FeatureTensor {
    pub fn new(values: RealArray) -> Result<Self> {
        let [t, n, d] = values.shape() else {
            return Err(Error::shape(
                "FeatureTensor",
                format!("expected rank 3, got {:?}", values.shape()),
            ));
        };
        if *t == 0 || *n == 0 || *d < 2 || d % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "feature extents [{t}, {n}, {d}] need t >= 1, n >= 1 and an even d >= 2"
            )));
        }
        Ok(Self { values })
    }

    pub fn from_vec(t: usize, n: usize, d: usize, data: Vec<f32>) -> Result<Self> {
        Self::new(RealArray::new(vec![t, n, d], data)?)
    }

    pub fn t(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn n(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn d(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn values(&self) -> &RealArray {
        &self.values
    }

    pub fn into_values(self) -> RealArray {
        self.values
    }

    /// All patch/channel values of timestep `i`, flattened.
    pub fn frame(&self, i: usize) -> &[f32] {
        let stride = self.n() * self.d();
        &self.values.data()[i * stride..(i + 1) * stride]
    }

    /// Rows `start..=end` as a new clip.
    pub fn trim(&self, seg: Segment) -> Result<FeatureTensor> {
        if seg.end >= self.t() || seg.start > seg.end {
            return Err(Error::InvalidArgument(format!(
                "segment [{}, {}] outside clip of length {}",
                seg.start,
                seg.end,
                self.t()
            )));
        }
        let stride = self.n() * self.d();
        let data = self.values.data()[seg.start * stride..(seg.end + 1) * stride].to_vec();
        FeatureTensor::from_vec(seg.len(), self.n(), self.d(), data)
    }
}

/// Inclusive timestep interval.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
}

impl Segment {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if end < start {
            return Err(Error::InvalidArgument(format!(
                "segment end {end} precedes start {start}"
            )));
        }
        Ok(Self { start, end })
    }

    /// Number of timesteps covered.
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn as_interval(&self) -> (f64, f64) {
        (self.start as f64, self.end as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub support: Vec<(FeatureTensor, ClassId)>,
    pub query: FeatureTensor,
    pub ground_truth: Vec<(Segment, ClassId)>,
    pub shot: usize,
}

impl Episode {
    pub fn new(
        support: Vec<(FeatureTensor, ClassId)>,
        query: FeatureTensor,
        ground_truth: Vec<(Segment, ClassId)>,
    ) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::InvalidArgument("episode has no support clips".into()));
        }
        for (seg, _) in &ground_truth {
            if seg.end >= query.t() {
                return Err(Error::InvalidArgument(format!(
                    "ground-truth segment [{}, {}] outside query of length {}",
                    seg.start,
                    seg.end,
                    query.t()
                )));
            }
        }
        let shot = support.len();
        Ok(Self {
            support,
            query,
            ground_truth,
            shot,
        })
    }

    /// Class inherited from the support set.
    pub fn class_id(&self) -> ClassId {
        self.support[0].1
    }

    pub fn segments(&self) -> Vec<Segment> {
        self.ground_truth.iter().map(|(s, _)| *s).collect()
    }

    /// Per-timestep foreground mask over the query.
    pub fn foreground_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.query.t()];
        for (seg, _) in &self.ground_truth {
            mask[seg.start..=seg.end].iter_mut().for_each(|m| *m = true);
        }
        mask
    }

    pub fn support_clips(&self) -> Vec<&FeatureTensor> {
        self.support.iter().map(|(f, _)| f).collect()
    }
}

/// Support clips concatenated along time.
#[derive(Clone, Debug, PartialEq)]
pub struct SupportConcat(pub FeatureTensor);

impl SupportConcat {
    pub fn features(&self) -> &FeatureTensor {
        &self.0
    }
}

pub fn concat_support(clips: &[&FeatureTensor]) -> Result<SupportConcat> {
    let first = clips
        .first()
        .ok_or_else(|| Error::InvalidArgument("no support clips to concatenate".into()))?;
    let (n, d) = (first.n(), first.d());
    let mut data = Vec::with_capacity(clips.iter().map(|c| c.values().len()).sum());
    let mut t_total = 0;
    for (i, clip) in clips.iter().enumerate() {
        if clip.n() != n || clip.d() != d {
            return Err(Error::shape(
                "concat_support",
                format!(
                    "clip {i} has [n={}, d={}], expected [n={n}, d={d}]",
                    clip.n(),
                    clip.d()
                ),
            ));
        }
        t_total += clip.t();
        data.extend_from_slice(clip.values().data());
    }
    Ok(SupportConcat(FeatureTensor::from_vec(t_total, n, d, data)?))
}

/// Parameters of the synthetic episode generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub t_query: usize,
    pub t_max: usize,
    /// Number of planted action instances in the query.
    pub instances: usize,
    pub class_id: u32,
    pub n: usize,
    pub d: usize,
    /// Per-entry RMS ratio of class signal to background noise; `inf`
    /// disables noise.
    pub snr: f64,
    pub support_len: usize,
    pub shot: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Minimum background gap between planted instances.
    pub min_gap: usize,
    /// Seed of the per-class signature vectors, shared across episodes.
    pub signature_seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            t_query: 64,
            t_max: 128,
            instances: 1,
            class_id: 0,
            n: 16,
            d: 64,
            snr: 10.0,
            support_len: 16,
            shot: 1,
            min_len: 6,
            max_len: 16,
            min_gap: 4,
            signature_seed: 0x5eed_c1a5,
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.instances == 0 {
            return bad("synthetic episode needs at least one instance".into());
        }
        if self.t_query == 0 || self.t_query > self.t_max {
            return bad(format!(
                "query length {} must be in 1..={}",
                self.t_query, self.t_max
            ));
        }
        if self.n == 0 || self.d < 2 || self.d % 2 != 0 {
            return bad(format!("bad feature extents n={} d={}", self.n, self.d));
        }
        if self.min_len < 2 || self.min_len > self.max_len {
            return bad(format!(
                "instance length range {}..={} (min must be >= 2)",
                self.min_len, self.max_len
            ));
        }
        if self.shot == 0 || self.support_len == 0 {
            return bad("support needs shot >= 1 and support_len >= 1".into());
        }
        if !(self.snr > 0.0) {
            return bad(format!("snr must be positive, got {}", self.snr));
        }
        Ok(())
    }

    fn noise_std(&self) -> f32 {
        if self.snr.is_infinite() {
            0.0
        } else {
            (1.0 / self.snr) as f32
        }
    }
}

/// Fixed unit direction for `class`, scaled so entries have unit RMS.
pub fn class_signature(signature_seed: u64, class: ClassId, n: usize, d: usize) -> Vec<f32> {
    let mut rng = Rng::with_stream(signature_seed, class.0 as u64 + 1);
    let raw: Vec<f64> = (0..n * d).map(|_| rng.normal()).collect();
    let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = ((n * d) as f64).sqrt() / norm;
    raw.into_iter().map(|v| (v * scale) as f32).collect()
}

/// Non-overlapping instance placement inside `[0, t)`.
fn place_segments(rng: &mut Rng, spec: &SynthSpec, t: usize) -> Result<Vec<Segment>> {
    let lens: Vec<usize> = (0..spec.instances)
        .map(|_| rng.int_inclusive(spec.min_len, spec.max_len))
        .collect();
    let occupied = lens.iter().sum::<usize>() + spec.min_gap * (spec.instances - 1);
    if occupied > t {
        return Err(Error::InvalidArgument(format!(
            "{} instances ({} steps incl. gaps) do not fit in {t} steps",
            spec.instances, occupied
        )));
    }
    let free = t - occupied;
    // Split the free steps into instances + 1 gaps.
    let mut cuts: Vec<usize> = (0..spec.instances).map(|_| rng.int_inclusive(0, free)).collect();
    cuts.sort_unstable();
    let mut segs = Vec::with_capacity(spec.instances);
    let mut cursor = 0;
    let mut prev_cut = 0;
    for (k, (&len, &cut)) in lens.iter().zip(&cuts).enumerate() {
        cursor += cut - prev_cut;
        if k > 0 {
            cursor += spec.min_gap;
        }
        segs.push(Segment::new(cursor, cursor + len - 1)?);
        cursor += len;
        prev_cut = cut;
    }
    Ok(segs)
}

fn synth_frames(
    rng: &mut Rng,
    t: usize,
    spec: &SynthSpec,
    signature: &[f32],
    active: impl Fn(usize) -> bool,
) -> Result<FeatureTensor> {
    let stride = spec.n * spec.d;
    let sigma = spec.noise_std();
    let mut data = Vec::with_capacity(t * stride);
    for step in 0..t {
        let on = active(step);
        for &sig in signature {
            let noise = rng.normal() as f32 * sigma;
            data.push(if on { sig + noise } else { noise });
        }
    }
    FeatureTensor::from_vec(t, spec.n, spec.d, data)
}

/// An untrimmed video with planted instances of `class` and its segments.
pub fn synth_video(rng: &mut Rng, spec: &SynthSpec) -> Result<(FeatureTensor, Vec<Segment>)> {
    spec.validate()?;
    let class = ClassId(spec.class_id);
    let signature = class_signature(spec.signature_seed, class, spec.n, spec.d);
    let segs = place_segments(rng, spec, spec.t_query)?;
    let mask = {
        let mut m = vec![false; spec.t_query];
        for s in &segs {
            m[s.start..=s.end].iter_mut().for_each(|v| *v = true);
        }
        m
    };
    let video = synth_frames(rng, spec.t_query, spec, &signature, |i| mask[i])?;
    Ok((video, segs))
}

/// One synthetic episode: background noise with the class signature planted
/// on every in-segment query step, plus `shot` trimmed support clips that
/// carry the same signature throughout.
pub fn synth_episode(rng: &mut Rng, spec: &SynthSpec) -> Result<Episode> {
    let class = ClassId(spec.class_id);
    let (query, segs) = synth_video(rng, spec)?;
    let signature = class_signature(spec.signature_seed, class, spec.n, spec.d);
    let support = (0..spec.shot)
        .map(|_| synth_frames(rng, spec.support_len, spec, &signature, |_| true).map(|f| (f, class)))
        .collect::<Result<Vec<_>>>()?;
    Episode::new(support, query, segs.into_iter().map(|s| (s, class)).collect())
}
