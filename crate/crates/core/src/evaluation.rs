//! Temporal-IoU average precision and the episodic evaluation protocol.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::episodes::{sample_episodes, Dataset, Episode, Split};
use crate::error::{Error, Result};
use crate::localizer::{sort_by_rank, tiou, SegmentPrediction};

/// All-point interpolated AP of `preds` against `gts` at one tIoU threshold.
/// Each ground-truth interval is matched at most once, greedily in rank
/// order, to its best unmatched overlap.
pub fn average_precision(preds: &[SegmentPrediction], gts: &[(f64, f64)], threshold: f64) -> f64 {
    if gts.is_empty() {
        return if preds.is_empty() { 1.0 } else { 0.0 };
    }
    let mut ranked = preds.to_vec();
    sort_by_rank(&mut ranked);
    let mut matched = vec![false; gts.len()];
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(ranked.len());
    for (rank, p) in ranked.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if matched[g] {
                continue;
            }
            let o = tiou(p.interval(), *gt);
            if o >= threshold && best.map_or(true, |(_, b)| o > b) {
                best = Some((g, o));
            }
        }
        if let Some((g, _)) = best {
            matched[g] = true;
            tp += 1;
        }
        points.push((tp as f64 / gts.len() as f64, tp as f64 / (rank + 1) as f64));
    }
    // Precision envelope from the right, then area under the step curve.
    let mut ap = 0.0;
    let mut envelope = 0.0f64;
    let mut prev_recall = points.last().map_or(0.0, |p| p.0);
    for &(recall, precision) in points.iter().rev() {
        ap += (prev_recall - recall) * envelope;
        envelope = envelope.max(precision);
        prev_recall = recall;
    }
    ap += prev_recall * envelope;
    ap.clamp(0.0, 1.0)
}

fn default_thresholds() -> Vec<f64> {
    (0..10).map(|k| f64::from(50 + 5 * k) / 100.0).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub tiou_thresholds: Vec<f64>,
    pub shot: usize,
    pub split_seed: u64,
    /// Episodes sampled by the protocol.
    pub episodes: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tiou_thresholds: default_thresholds(),
            shot: 1,
            split_seed: 2024,
            episodes: 10,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let t = &self.tiou_thresholds;
        if t.is_empty() || t.iter().any(|&v| !(v > 0.0 && v <= 1.0)) || t.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!(
                "tIoU thresholds must be ascending, distinct and in (0, 1], got {t:?}"
            )));
        }
        if self.shot == 0 {
            return Err(Error::Config("shot must be >= 1".into()));
        }
        Ok(())
    }

    /// Index of the 0.5 threshold, or of the first one when 0.5 is absent.
    pub fn primary_index(&self) -> usize {
        self.tiou_thresholds
            .iter()
            .position(|&t| (t - 0.5).abs() < 1e-9)
            .unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub id: String,
    pub predictions: Vec<SegmentPrediction>,
    pub ground_truth: Vec<(f64, f64)>,
    pub ap: Vec<f64>,
}

impl EpisodeResult {
    pub fn score(id: &str, predictions: Vec<SegmentPrediction>, ground_truth: Vec<(f64, f64)>, cfg: &EvalConfig) -> Self {
        let ap = cfg
            .tiou_thresholds
            .iter()
            .map(|&t| average_precision(&predictions, &ground_truth, t))
            .collect();
        Self {
            id: id.to_string(),
            predictions,
            ground_truth,
            ap,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub id: String,
    pub ground_truth: usize,
    pub predictions: usize,
    pub ap: Vec<f64>,
}

/// Aggregate over one set of episodes. With no episodes every mAP is 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub episodes: usize,
    pub thresholds: Vec<f64>,
    pub map: Vec<f64>,
    #[serde(rename = "map@0.5")]
    pub map_primary: f64,
    /// Average of `map` over all thresholds.
    pub mean: f64,
    pub per_episode: Vec<EpisodeSummary>,
}

pub fn map_over_episodes(results: &[EpisodeResult], cfg: &EvalConfig) -> Report {
    let n = cfg.tiou_thresholds.len();
    let mut map = vec![0.0; n];
    for r in results {
        for (m, a) in map.iter_mut().zip(&r.ap) {
            *m += a;
        }
    }
    if !results.is_empty() {
        map.iter_mut().for_each(|m| *m /= results.len() as f64);
    }
    Report {
        episodes: results.len(),
        thresholds: cfg.tiou_thresholds.clone(),
        map_primary: map[cfg.primary_index()],
        mean: map.iter().sum::<f64>() / n as f64,
        map,
        per_episode: results
            .iter()
            .map(|r| EpisodeSummary {
                id: r.id.clone(),
                ground_truth: r.ground_truth.len(),
                predictions: r.predictions.len(),
                ap: r.ap.clone(),
            })
            .collect(),
    }
}

/// All episodes plus the single-instance (one gt) and multi-instance
/// (two or more gts) tracks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolReport {
    pub all: Report,
    pub single: Report,
    pub multi: Report,
    pub warnings: Vec<String>,
}

impl ProtocolReport {
    pub fn from_results(results: &[EpisodeResult], cfg: &EvalConfig, warnings: Vec<String>) -> Self {
        let pick = |keep: fn(usize) -> bool| -> Vec<EpisodeResult> {
            results.iter().filter(|r| keep(r.ground_truth.len())).cloned().collect()
        };
        Self {
            all: map_over_episodes(results, cfg),
            single: map_over_episodes(&pick(|n| n == 1), cfg),
            multi: map_over_episodes(&pick(|n| n >= 2), cfg),
            warnings,
        }
    }

    fn tracks(&self) -> [(&'static str, &Report); 3] {
        [("all", &self.all), ("single", &self.single), ("multi", &self.multi)]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("track,threshold,map,episodes\n");
        for (name, r) in self.tracks() {
            for (t, m) in r.thresholds.iter().zip(&r.map) {
                let _ = writeln!(out, "{name},{t:.2},{m},{}", r.episodes);
            }
            let _ = writeln!(out, "{name},mean,{},{}", r.mean, r.episodes);
        }
        out
    }

    pub fn table(&self) -> String {
        let mut out = format!("{:<8} {:>8} {:>10} {:>10}\n", "track", "episodes", "mAP@0.5", "mean");
        for (name, r) in self.tracks() {
            let _ = writeln!(
                out,
                "{name:<8} {:>8} {:>10.4} {:>10.4}",
                r.episodes, r.map_primary, r.mean
            );
        }
        out
    }
}

fn gt_intervals(ep: &Episode) -> Vec<(f64, f64)> {
    ep.segments().iter().map(|s| s.as_interval()).collect()
}

/// Runs `pipeline` on every episode in order (in parallel) and scores it.
pub fn evaluate_episodes<F>(episodes: &[(String, Episode)], cfg: &EvalConfig, pipeline: F) -> Result<Vec<EpisodeResult>>
where
    F: Fn(&Episode) -> Result<Vec<SegmentPrediction>> + Sync,
{
    cfg.validate()?;
    episodes
        .par_iter()
        .map(|(id, ep)| Ok(EpisodeResult::score(id, pipeline(ep)?, gt_intervals(ep), cfg)))
        .collect()
}

/// Samples `cfg.episodes` test-split episodes and evaluates `pipeline` on
/// them. Classes without enough videos for the shot count are skipped with
/// a warning.
pub fn run_protocol<F>(dataset: &Dataset, cfg: &EvalConfig, pipeline: F) -> Result<ProtocolReport>
where
    F: Fn(&Episode) -> Result<Vec<SegmentPrediction>> + Sync,
{
    cfg.validate()?;
    let (refs, warnings) = sample_episodes(
        &dataset.videos,
        &dataset.manifest.split,
        Some(Split::Test),
        cfg.episodes,
        cfg.shot,
        cfg.split_seed,
    )?;
    for w in &warnings {
        log::warn!("{w}");
    }
    let episodes = refs
        .iter()
        .map(|r| Ok((r.id.clone(), dataset.materialize(r)?)))
        .collect::<Result<Vec<_>>>()?;
    let results = evaluate_episodes(&episodes, cfg, pipeline)?;
    Ok(ProtocolReport::from_results(&results, cfg, warnings))
}
