//! Segment decoding: score matrix, top-k pairs, soft-NMS and interval
//! clustering.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::boundary::BoundaryDistributions;
use crate::container::{read_file, write_file};
use crate::episodes::ClassId;
use crate::error::{Error, Result};

/// Outer product of the start and end distributions over the valid range.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    pub t_valid: usize,
    pub s: Vec<f64>,
}

impl ScoreMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.s[i * self.t_valid + j]
    }
}

pub fn score_matrix(s_s: &[f64], s_e: &[f64], t_valid: usize) -> Result<ScoreMatrix> {
    if s_s.len() < t_valid || s_e.len() < t_valid {
        return Err(Error::shape(
            "score_matrix",
            format!("distributions of length {}/{} for t_valid {t_valid}", s_s.len(), s_e.len()),
        ));
    }
    let mut s = Vec::with_capacity(t_valid * t_valid);
    for &a in &s_s[..t_valid] {
        s.extend(s_e[..t_valid].iter().map(|&b| a * b));
    }
    Ok(ScoreMatrix { t_valid, s })
}

/// The `k` best cells with `j > i`, by descending score then `(i, j)`.
pub fn top_k_pairs(m: &ScoreMatrix, k: usize) -> Vec<(usize, usize, f64)> {
    let t = m.t_valid;
    let mut cells: Vec<(usize, usize, f64)> = (0..t)
        .flat_map(|i| (i + 1..t).map(move |j| (i, j)))
        .map(|(i, j)| (i, j, m.get(i, j)))
        .collect();
    let order = |a: &(usize, usize, f64), b: &(usize, usize, f64)| {
        b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1))
    };
    if k < cells.len() {
        cells.select_nth_unstable_by(k, order);
        cells.truncate(k);
    }
    cells.sort_by(order);
    cells
}

/// Temporal IoU of two closed real intervals.
pub fn tiou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    (inter / union).clamp(0.0, 1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentPrediction {
    pub start: f64,
    pub end: f64,
    pub score: f64,
    pub class: ClassId,
}

impl SegmentPrediction {
    pub fn interval(&self) -> (f64, f64) {
        (self.start, self.end)
    }
}

fn by_rank(a: &SegmentPrediction, b: &SegmentPrediction) -> std::cmp::Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.start.total_cmp(&b.start))
        .then(a.end.total_cmp(&b.end))
}

/// Sorts by descending score, then ascending start and end.
pub fn sort_by_rank(preds: &mut [SegmentPrediction]) {
    preds.sort_by(by_rank);
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NmsMode {
    #[default]
    Soft,
    Hard,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NmsConfig {
    pub iou_threshold: f64,
    pub sigma: f64,
    pub score_floor: f64,
    pub mode: NmsMode,
}

impl Default for NmsConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.9,
            sigma: 0.5,
            score_floor: 1e-6,
            mode: NmsMode::Soft,
        }
    }
}

/// Greedy soft-NMS: each kept prediction decays (or, in hard mode, removes)
/// the remaining ones it overlaps by more than the threshold.
pub fn soft_nms(preds: &[SegmentPrediction], cfg: &NmsConfig) -> Vec<SegmentPrediction> {
    let mut pool: Vec<SegmentPrediction> = preds.iter().filter(|p| p.score >= cfg.score_floor).copied().collect();
    let mut kept = Vec::with_capacity(pool.len());
    while !pool.is_empty() {
        let best = (0..pool.len()).min_by(|&a, &b| by_rank(&pool[a], &pool[b])).unwrap_or(0);
        let top = pool.swap_remove(best);
        kept.push(top);
        pool.retain_mut(|p| {
            let overlap = tiou(top.interval(), p.interval());
            if overlap > cfg.iou_threshold {
                match cfg.mode {
                    NmsMode::Hard => return false,
                    NmsMode::Soft => p.score *= (-overlap * overlap / cfg.sigma).exp(),
                }
            }
            p.score >= cfg.score_floor
        });
    }
    sort_by_rank(&mut kept);
    kept
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterParams {
    pub eps: f64,
    pub min_samples: usize,
}

impl Default for ClusterParams {
    fn default() -> Self {
        Self { eps: 3.0, min_samples: 2 }
    }
}

/// Density clustering with the Euclidean metric. Returns one label per
/// point, `-1` for noise. Clusters are numbered by their smallest member
/// index; a border point joins the cluster of its lowest-indexed core
/// neighbour.
pub fn dbscan(points: &[(f64, f64)], p: &ClusterParams) -> Vec<i64> {
    let n = points.len();
    let eps2 = p.eps * p.eps;
    let neighbours: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| {
                    let (dx, dy) = (points[i].0 - points[j].0, points[i].1 - points[j].1);
                    dx * dx + dy * dy <= eps2
                })
                .collect()
        })
        .collect();
    let core: Vec<bool> = neighbours.iter().map(|nb| nb.len() >= p.min_samples).collect();
    let mut label = vec![-1i64; n];
    let mut next = 0;
    for seed in 0..n {
        if !core[seed] || label[seed] >= 0 {
            continue;
        }
        label[seed] = next;
        let mut queue = VecDeque::from([seed]);
        while let Some(i) = queue.pop_front() {
            for &j in &neighbours[i] {
                if core[j] && label[j] < 0 {
                    label[j] = next;
                    queue.push_back(j);
                }
            }
        }
        next += 1;
    }
    for i in 0..n {
        if !core[i] {
            if let Some(&c) = neighbours[i].iter().find(|&&j| core[j]) {
                label[i] = label[c];
            }
        }
    }
    // Renumber by first appearance so cluster ids follow smallest member.
    let mut remap = vec![-1i64; next as usize];
    let mut fresh = 0;
    for l in label.iter_mut().filter(|l| **l >= 0) {
        let slot = &mut remap[*l as usize];
        if *slot < 0 {
            *slot = fresh;
            fresh += 1;
        }
        *l = *slot;
    }
    label
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterScore {
    #[default]
    Max,
    Mean,
}

/// Replaces every cluster of `(start, end)` points by its centroid; noise is
/// dropped. Output is in cluster order.
pub fn cluster_refine(preds: &[SegmentPrediction], p: &ClusterParams, mode: ClusterScore) -> Vec<SegmentPrediction> {
    let points: Vec<(f64, f64)> = preds.iter().map(|q| q.interval()).collect();
    let labels = dbscan(&points, p);
    let clusters = labels.iter().copied().max().map_or(0, |m| (m + 1) as usize);
    let mut members: Vec<Vec<&SegmentPrediction>> = vec![Vec::new(); clusters];
    for (q, &l) in preds.iter().zip(&labels) {
        if l >= 0 {
            members[l as usize].push(q);
        }
    }
    members
        .into_iter()
        .map(|m| {
            let k = m.len() as f64;
            let score = match mode {
                ClusterScore::Max => m.iter().map(|q| q.score).fold(f64::NEG_INFINITY, f64::max),
                ClusterScore::Mean => m.iter().map(|q| q.score).sum::<f64>() / k,
            };
            SegmentPrediction {
                start: m.iter().map(|q| q.start).sum::<f64>() / k,
                end: m.iter().map(|q| q.end).sum::<f64>() / k,
                score,
                class: m[0].class,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizerConfig {
    pub top_k: usize,
    pub nms: NmsConfig,
    pub cluster: ClusterParams,
    pub cluster_score: ClusterScore,
    /// Run interval clustering after NMS.
    pub use_ic: bool,
    /// Multiply each pair score by the geometric mean foreground
    /// probability inside it.
    pub fg_rescore: bool,
    /// Drop pairs scoring below this fraction of the best pair.
    pub min_relative_score: f64,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        Self {
            top_k: 500,
            nms: NmsConfig::default(),
            cluster: ClusterParams::default(),
            cluster_score: ClusterScore::Max,
            use_ic: true,
            fg_rescore: true,
            min_relative_score: 0.1,
        }
    }
}

/// Output of every decoding stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizeStages {
    pub pairs: Vec<SegmentPrediction>,
    pub after_nms: Vec<SegmentPrediction>,
    pub segments: Vec<SegmentPrediction>,
}

/// `ln(sigmoid(x))` without overflow.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn localize(bd: &BoundaryDistributions, class: ClassId, cfg: &LocalizerConfig) -> Result<LocalizeStages> {
    if cfg.top_k == 0 {
        return Err(Error::Config("top_k must be >= 1".into()));
    }
    let m = score_matrix(&bd.s_s, &bd.s_e, bd.t_valid)?;
    let mut prefix = vec![0.0; bd.t_valid + 1];
    for t in 0..bd.t_valid {
        prefix[t + 1] = prefix[t] + log_sigmoid(bd.s_c[t]);
    }
    let rescore = |i: usize, j: usize, s: f64| {
        if cfg.fg_rescore {
            s * ((prefix[j + 1] - prefix[i]) / (j + 1 - i) as f64).exp()
        } else {
            s
        }
    };
    let mut pairs: Vec<SegmentPrediction> = if cfg.fg_rescore {
        let mut all = ScoreMatrix {
            t_valid: m.t_valid,
            s: m.s.clone(),
        };
        for i in 0..m.t_valid {
            for j in i + 1..m.t_valid {
                all.s[i * m.t_valid + j] = rescore(i, j, m.get(i, j));
            }
        }
        top_k_pairs(&all, cfg.top_k)
    } else {
        top_k_pairs(&m, cfg.top_k)
    }
    .into_iter()
    .map(|(i, j, score)| SegmentPrediction {
        start: i as f64,
        end: j as f64,
        score,
        class,
    })
    .collect();
    sort_by_rank(&mut pairs);
    if let Some(best) = pairs.first().map(|p| p.score) {
        pairs.retain(|p| p.score >= best * cfg.min_relative_score);
    }
    let after_nms = soft_nms(&pairs, &cfg.nms);
    let mut segments = if cfg.use_ic {
        cluster_refine(&after_nms, &cfg.cluster, cfg.cluster_score)
    } else {
        after_nms.clone()
    };
    sort_by_rank(&mut segments);
    Ok(LocalizeStages {
        pairs,
        after_nms,
        segments,
    })
}

/// One row of a prediction file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub video: String,
    pub start: f64,
    pub end: f64,
    pub score: f64,
    pub class: String,
    /// Episode the prediction came from; a query video may recur.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub episode: Option<String>,
}

impl PredictionRecord {
    pub fn new(video: &str, p: &SegmentPrediction) -> Self {
        Self {
            video: video.to_string(),
            start: p.start,
            end: p.end,
            score: p.score,
            class: p.class.name(),
            episode: None,
        }
    }

    pub fn with_episode(mut self, episode: &str) -> Self {
        self.episode = Some(episode.to_string());
        self
    }

    pub fn prediction(&self) -> Result<SegmentPrediction> {
        let class = ClassId::parse(&self.class)
            .ok_or_else(|| Error::InvalidArgument(format!("prediction for {:?}: bad class {:?}", self.video, self.class)))?;
        Ok(SegmentPrediction {
            start: self.start,
            end: self.end,
            score: self.score,
            class,
        })
    }
}

pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let mut text = serde_json::to_string_pretty(records)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let records: Vec<PredictionRecord> = serde_json::from_slice(&read_file(path)?)?;
    for (k, r) in records.iter().enumerate() {
        if !(r.end > r.start) || !r.score.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "{}: prediction {k} for {:?} has start {}, end {}, score {}",
                path.display(),
                r.video,
                r.start,
                r.end,
                r.score
            )));
        }
    }
    Ok(records)
}
