//! Ablation grids: stage toggles, channel width, loss terms and label
//! generator variants. Every row trains the heads on the training prefix
//! and scores the held-out tail.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::episodes::Dataset;
use crate::error::Result;
use crate::pipeline::holdout_experiment;

/// Width of every label Gaussian in the "fixed sigma" row when the config
/// does not set one.
pub const DEFAULT_FIXED_SIGMA: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationTable {
    Component,
    Channel,
    Loss,
    Label,
}

impl AblationTable {
    pub fn name(self) -> &'static str {
        match self {
            Self::Component => "component",
            Self::Channel => "channel",
            Self::Loss => "loss",
            Self::Label => "label",
        }
    }

    /// Whether rows need their own synthetic data instead of a shared set.
    fn regenerates_data(self) -> bool {
        self == Self::Channel
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub table: String,
    pub row: String,
    pub episodes: usize,
    #[serde(rename = "map@0.5")]
    pub map_primary: f64,
    pub mean: f64,
    pub final_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn rows_of(&self, table: AblationTable) -> impl Iterator<Item = &AblationRow> {
        self.rows.iter().filter(move |r| r.table == table.name())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("table,row,episodes,map@0.5,mean,final_loss\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.table, r.row, r.episodes, r.map_primary, r.mean, r.final_loss
            );
        }
        out
    }

    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<10} {:<14} {:>8} {:>10} {:>10}\n",
            "table", "row", "episodes", "mAP@0.5", "mean"
        );
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<10} {:<14} {:>8} {:>10.4} {:>10.4}",
                r.table, r.row, r.episodes, r.map_primary, r.mean
            );
        }
        out
    }
}

/// The six SCA/ICD/SCP combinations, each a (label, config) pair.
pub fn component_variants(base: &RunConfig) -> Vec<(String, RunConfig)> {
    const ROWS: [(bool, bool, bool); 6] = [
        (false, false, false),
        (false, false, true),
        (false, true, true),
        (true, false, true),
        (true, true, false),
        (true, true, true),
    ];
    ROWS.iter()
        .map(|&(sca, icd, scp)| {
            let mut cfg = base.clone();
            cfg.scr.use_sca = sca;
            cfg.scr.use_icd = icd;
            cfg.scp.enabled = scp;
            let parts: Vec<&str> = [(sca, "SCA"), (icd, "ICD"), (scp, "SCP")]
                .iter()
                .filter(|(on, _)| *on)
                .map(|(_, n)| *n)
                .collect();
            let label = if parts.is_empty() { "none".to_string() } else { parts.join("+") };
            (label, cfg)
        })
        .collect()
}

pub fn channel_variants(base: &RunConfig) -> Vec<(String, RunConfig)> {
    [512, 2048]
        .into_iter()
        .map(|d| (format!("d={d}"), base.clone().with_channels(d)))
        .collect()
}

/// The six loss-term subsets; kept weights are rescaled to sum to one.
pub fn loss_variants(base: &RunConfig) -> Result<Vec<(String, RunConfig)>> {
    const ROWS: [(bool, bool, bool); 6] = [
        (true, false, false),
        (false, true, false),
        (true, true, false),
        (false, true, true),
        (true, false, true),
        (true, true, true),
    ];
    ROWS.iter()
        .map(|&(l1, kl, cls)| {
            let mut cfg = base.clone();
            cfg.loss.weights = base.loss.weights.restricted(kl, l1, cls)?;
            let parts: Vec<&str> = [(l1, "L1"), (kl, "KL"), (cls, "cls")]
                .iter()
                .filter(|(on, _)| *on)
                .map(|(_, n)| *n)
                .collect();
            Ok((parts.join("+"), cfg))
        })
        .collect()
}

pub fn label_variants(base: &RunConfig) -> Vec<(String, RunConfig)> {
    let mut no_smooth = base.clone();
    no_smooth.labels.smooth_window = 1;
    let mut no_noise = base.clone();
    no_noise.labels.noise_level = 0.0;
    let mut fixed = base.clone();
    fixed.labels.fixed_sigma = Some(base.labels.fixed_sigma.unwrap_or(DEFAULT_FIXED_SIGMA));
    vec![
        ("w/o smooth".into(), no_smooth),
        ("w/o noise".into(), no_noise),
        ("fixed sigma".into(), fixed),
        ("full".into(), base.clone()),
    ]
}

pub fn variants(base: &RunConfig, table: AblationTable) -> Result<Vec<(String, RunConfig)>> {
    Ok(match table {
        AblationTable::Component => component_variants(base),
        AblationTable::Channel => channel_variants(base),
        AblationTable::Loss => loss_variants(base)?,
        AblationTable::Label => label_variants(base),
    })
}

/// Runs every row of `tables`. Rows share `dataset` (or one generated from
/// `base.data`) except channel rows, which synthesize data at their width.
pub fn run_ablation(base: &RunConfig, dataset: Option<&Dataset>, tables: &[AblationTable]) -> Result<AblationReport> {
    base.validate()?;
    let mut generated = None;
    let mut report = AblationReport::default();
    for &table in tables {
        for (row, cfg) in variants(base, table)? {
            cfg.validate()?;
            log::info!("ablation {} / {row}", table.name());
            let own;
            let ds = if table.regenerates_data() {
                own = Dataset::generate(&cfg.data)?;
                &own
            } else if let Some(ds) = dataset {
                ds
            } else {
                if generated.is_none() {
                    generated = Some(Dataset::generate(&base.data)?);
                }
                generated.as_ref().expect("generated above")
            };
            let outcome = holdout_experiment(&cfg, ds)?;
            report.rows.push(AblationRow {
                table: table.name().into(),
                row,
                episodes: outcome.trained.all.episodes,
                map_primary: outcome.trained.all.map_primary,
                mean: outcome.trained.all.mean,
                final_loss: outcome.final_loss,
            });
        }
    }
    Ok(report)
}
