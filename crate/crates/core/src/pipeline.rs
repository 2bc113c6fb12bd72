//! End-to-end episode processing with a frozen transformer and trainable
//! boundary heads.

use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use crate::boundary::{boundary_scores, mask_to_tmax, refine_distributions, BoundaryDistributions, HeadParams};
use crate::config::RunConfig;
use crate::container::{read_checkpoint, write_checkpoint};
use crate::episodes::{Dataset, Episode, EpisodeRef};
use crate::error::{Error, Result};
use crate::evaluation::{EpisodeResult, ProtocolReport};
use crate::localizer::{localize, LocalizeStages, SegmentPrediction};
use crate::numerics::Rng;
use crate::scr::ScrModel;
use crate::supervision::{prepare_samples, train_heads, LossBreakdown, TrainSample};

/// Everything one episode produced, stage by stage.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpisodeOutput {
    pub raw: BoundaryDistributions,
    pub refined: BoundaryDistributions,
    pub stages: LocalizeStages,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pipeline {
    pub config: RunConfig,
    pub scr: ScrModel,
    pub heads: HeadParams,
}

impl Pipeline {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let scr = ScrModel::init(&config.scr)?;
        let heads = HeadParams::init(config.scr.d_model, config.heads.window, config.heads.init_seed)?;
        Ok(Self { config, scr, heads })
    }

    /// Builds the pipeline and loads any transformer and head arrays found
    /// in `checkpoint`.
    pub fn from_checkpoint(config: RunConfig, checkpoint: &Path) -> Result<Self> {
        let mut p = Self::new(config)?;
        let arrays = read_checkpoint(checkpoint)?;
        if arrays.iter().any(|(n, _)| n.starts_with("scr.")) {
            let scr: Vec<_> = arrays.iter().filter(|(n, _)| n.starts_with("scr.")).cloned().collect();
            p.scr.load_arrays(&scr)?;
        }
        let heads = HeadParams::from_named(&arrays)?;
        if heads.d_model() != p.config.scr.d_model {
            return Err(Error::shape(
                "load checkpoint",
                format!("heads expect d_model {}, config has {}", heads.d_model(), p.config.scr.d_model),
            ));
        }
        p.heads = heads;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut arrays = self.scr.named_arrays();
        arrays.extend(self.heads.named_arrays());
        write_checkpoint(path, &arrays)
    }

    pub fn distributions(&self, episode: &Episode) -> Result<BoundaryDistributions> {
        let h = self.scr.forward(episode)?;
        let v = mask_to_tmax(&h.h_dec, self.config.t_max)?;
        boundary_scores(&v, &self.heads)
    }

    pub fn run_episode(&self, episode: &Episode) -> Result<EpisodeOutput> {
        let raw = self.distributions(episode)?;
        let refined = if self.config.scp.enabled {
            refine_distributions(&raw, &episode.query, &self.config.scp.scp())?
        } else {
            raw.clone()
        };
        let stages = localize(&refined, episode.class_id(), &self.config.localizer)?;
        Ok(EpisodeOutput { raw, refined, stages })
    }

    pub fn predict(&self, episode: &Episode) -> Result<Vec<SegmentPrediction>> {
        Ok(self.run_episode(episode)?.stages.segments)
    }

    pub fn samples(&self, episodes: &[Episode]) -> Result<Vec<TrainSample>> {
        prepare_samples(episodes, &self.scr, self.config.t_max, &self.config.labels, self.config.seed)
    }

    /// Trains the heads in place and returns the loss trace.
    pub fn train(&mut self, episodes: &[Episode]) -> Result<Vec<LossBreakdown>> {
        let samples = self.samples(episodes)?;
        self.train_samples(&samples)
    }

    /// Same as [`Pipeline::train`], materializing dataset episodes one at a
    /// time.
    pub fn train_refs(&mut self, dataset: &Dataset, refs: &[&EpisodeRef]) -> Result<Vec<LossBreakdown>> {
        let cfg = &self.config;
        let samples = refs
            .par_iter()
            .enumerate()
            .map(|(i, r)| {
                let ep = dataset.materialize(r)?;
                TrainSample::prepare(&ep, &self.scr, cfg.t_max, &cfg.labels, &mut Rng::with_stream(cfg.seed, i as u64))
            })
            .collect::<Result<Vec<_>>>()?;
        self.train_samples(&samples)
    }

    fn train_samples(&mut self, samples: &[TrainSample]) -> Result<Vec<LossBreakdown>> {
        let (heads, trace) = train_heads(samples, self.heads.clone(), &self.config.train_config())?;
        self.heads = heads;
        Ok(trace)
    }

    /// Scores the pipeline on dataset episodes, in order.
    pub fn evaluate_refs(&self, dataset: &Dataset, refs: &[&EpisodeRef]) -> Result<ProtocolReport> {
        let eval = &self.config.eval;
        eval.validate()?;
        let results = refs
            .par_iter()
            .map(|r| {
                let ep = dataset.materialize(r)?;
                let gt = ep.segments().iter().map(|s| s.as_interval()).collect();
                Ok(EpisodeResult::score(&r.id, self.predict(&ep)?, gt, eval))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ProtocolReport::from_results(&results, eval, Vec::new()))
    }
}

/// Which manifest episodes a command works on. The first
/// `train.episodes` entries form the training prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selection {
    All,
    Train,
    HeldOut,
}

pub fn select_episodes<'a>(dataset: &'a Dataset, n_train: usize, selection: Selection) -> Result<Vec<&'a EpisodeRef>> {
    let all = &dataset.manifest.episodes;
    let cut = n_train.min(all.len());
    let picked: Vec<&EpisodeRef> = match selection {
        Selection::All => all.iter().collect(),
        Selection::Train => all[..cut].iter().collect(),
        Selection::HeldOut => all[cut..].iter().collect(),
    };
    if picked.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no {selection:?} episodes: manifest has {}, training prefix is {n_train}",
            all.len()
        )));
    }
    Ok(picked)
}

/// Untrained and trained scores of one train-on-prefix, test-on-tail run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HoldoutOutcome {
    pub untrained: ProtocolReport,
    pub trained: ProtocolReport,
    pub final_loss: f64,
}

pub fn holdout_experiment(config: &RunConfig, dataset: &Dataset) -> Result<HoldoutOutcome> {
    let mut p = Pipeline::new(config.clone())?;
    let train = select_episodes(dataset, config.train.episodes, Selection::Train)?;
    let test = select_episodes(dataset, config.train.episodes, Selection::HeldOut)?;
    let untrained = p.evaluate_refs(dataset, &test)?;
    let trace = p.train_refs(dataset, &train)?;
    let trained = p.evaluate_refs(dataset, &test)?;
    Ok(HoldoutOutcome {
        untrained,
        trained,
        final_loss: trace.last().map_or(f64::NAN, |b| b.total),
    })
}
