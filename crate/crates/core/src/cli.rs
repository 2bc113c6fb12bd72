//! Command-line front end: dataset synthesis, inference, head training,
//! scoring and ablation grids.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::Serialize;

use crate::ablation::{run_ablation, AblationTable};
use crate::config::RunConfig;
use crate::container::write_file;
use crate::episodes::{read_annotations, ClassId, Dataset};
use crate::error::{Error, Result};
use crate::evaluation::{EpisodeResult, ProtocolReport};
use crate::localizer::{read_predictions, write_predictions, PredictionRecord, SegmentPrediction};
use crate::pipeline::{select_episodes, Pipeline, Selection};
use crate::supervision::trace_csv;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "fmital", version, about = "Few-shot multi-instance temporal action localization")]
pub struct Cli {
    /// TOML run configuration; omitted keys take their defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Overrides both the run seed and the data seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads (default: all cores).
    #[arg(long, short = 'j', global = true)]
    pub jobs: Option<usize>,

    /// Log more (-v info, -vv debug).
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    /// Print the effective configuration as TOML and exit.
    #[arg(long)]
    pub print_config: bool,

    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EpisodeArg {
    All,
    Train,
    HeldOut,
}

impl From<EpisodeArg> for Selection {
    fn from(a: EpisodeArg) -> Self {
        match a {
            EpisodeArg::All => Selection::All,
            EpisodeArg::Train => Selection::Train,
            EpisodeArg::HeldOut => Selection::HeldOut,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TableArg {
    Component,
    Channel,
    Loss,
    Label,
}

impl From<TableArg> for AblationTable {
    fn from(a: TableArg) -> Self {
        match a {
            TableArg::Component => AblationTable::Component,
            TableArg::Channel => AblationTable::Channel,
            TableArg::Loss => AblationTable::Loss,
            TableArg::Label => AblationTable::Label,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a dataset: features, annotations and an episode manifest.
    Gen {
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Run the full pipeline and write a prediction file.
    Run {
        #[arg(long, value_name = "DIR")]
        dataset: PathBuf,
        /// Trained parameters; untrained heads are used when omitted.
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        episodes: EpisodeArg,
        /// Write per-episode distributions and decoding stages here.
        #[arg(long, value_name = "DIR")]
        dump_dir: Option<PathBuf>,
    },
    /// Train the boundary heads on the training prefix of a dataset.
    TrainHeads {
        #[arg(long, value_name = "DIR")]
        dataset: PathBuf,
        /// Checkpoint to write.
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Loss trace CSV (default: next to the checkpoint).
        #[arg(long, value_name = "FILE")]
        trace: Option<PathBuf>,
    },
    /// Score a prediction file against annotations.
    Eval {
        #[arg(long, value_name = "FILE")]
        predictions: PathBuf,
        #[arg(long, value_name = "FILE")]
        annotations: PathBuf,
        /// Score the dataset's episodes, counting those without predictions.
        #[arg(long, value_name = "DIR")]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "all", requires = "dataset")]
        episodes: EpisodeArg,
        #[arg(long, value_name = "FILE")]
        report: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        csv: Option<PathBuf>,
    },
    /// Train and score configuration variants side by side.
    Ablate {
        /// Shared data; synthesized from the config when omitted.
        #[arg(long, value_name = "DIR")]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum, value_delimiter = ',', default_value = "component,loss,label")]
        tables: Vec<TableArg>,
        #[arg(long, value_name = "FILE")]
        report: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        csv: Option<PathBuf>,
    },
}

/// Maps an error to the process exit code.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => EXIT_USAGE,
        Error::NonFinite { .. } | Error::Diverged { .. } => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    init_logging(cli.verbose);
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new()
        .filter_level(level)
        .parse_env("FMITAL_LOG")
        .format_timestamp(None)
        .try_init();
}

pub fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.data.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn execute(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref(), cli.seed)?;
    if cli.print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(Error::Config("no subcommand given (try --help)".into()));
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(Error::Config("--jobs must be at least 1".into()));
        }
        pool = pool.num_threads(j);
    }
    let pool = pool
        .build()
        .map_err(|e| Error::InvalidArgument(format!("thread pool: {e}")))?;
    pool.install(|| dispatch(&cfg, command))
}

fn dispatch(cfg: &RunConfig, command: Command) -> Result<()> {
    match command {
        Command::Gen { out } => cmd_gen(cfg, &out),
        Command::Run {
            dataset,
            checkpoint,
            out,
            episodes,
            dump_dir,
        } => cmd_run(cfg, &dataset, checkpoint.as_deref(), &out, episodes.into(), dump_dir.as_deref()),
        Command::TrainHeads { dataset, out, trace } => {
            let trace = trace.unwrap_or_else(|| out.with_extension("loss.csv"));
            cmd_train_heads(cfg, &dataset, &out, &trace)
        }
        Command::Eval {
            predictions,
            annotations,
            dataset,
            episodes,
            report,
            csv,
        } => {
            let scope = dataset.as_deref().map(|d| (d, Selection::from(episodes)));
            let rep = cmd_eval(cfg, &predictions, &annotations, scope)?;
            print!("{}", rep.table());
            write_outputs(&rep, rep.to_csv(), report.as_deref(), csv.as_deref())
        }
        Command::Ablate {
            dataset,
            tables,
            report,
            csv,
        } => {
            let ds = dataset.as_deref().map(Dataset::load).transpose()?;
            let tables: Vec<AblationTable> = tables.into_iter().map(Into::into).collect();
            let rep = run_ablation(cfg, ds.as_ref(), &tables)?;
            print!("{}", rep.table());
            write_outputs(&rep, rep.to_csv(), report.as_deref(), csv.as_deref())
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn write_outputs<T: Serialize>(value: &T, csv_text: String, json: Option<&Path>, csv: Option<&Path>) -> Result<()> {
    if let Some(p) = json {
        write_json(p, value)?;
    }
    if let Some(p) = csv {
        write_file(p, csv_text.as_bytes())?;
    }
    Ok(())
}

pub fn cmd_gen(cfg: &RunConfig, out: &Path) -> Result<()> {
    let ds = Dataset::generate(&cfg.data)?;
    ds.save(out)?;
    println!(
        "wrote {} videos and {} episodes to {}",
        ds.videos.len(),
        ds.manifest.episodes.len(),
        out.display()
    );
    Ok(())
}

pub fn cmd_run(
    cfg: &RunConfig,
    dataset: &Path,
    checkpoint: Option<&Path>,
    out: &Path,
    selection: Selection,
    dump_dir: Option<&Path>,
) -> Result<()> {
    let ds = Dataset::load(dataset)?;
    let pipeline = match checkpoint {
        Some(c) => Pipeline::from_checkpoint(cfg.clone(), c)?,
        None => {
            log::warn!("no checkpoint given; boundary heads are untrained");
            Pipeline::new(cfg.clone())?
        }
    };
    let refs = select_episodes(&ds, cfg.train.episodes, selection)?;
    let outputs = refs
        .par_iter()
        .map(|r| {
            let ep = ds.materialize(r)?;
            let out = pipeline.run_episode(&ep)?;
            if let Some(dir) = dump_dir {
                write_json(&dir.join(format!("{}.json", r.id)), &out)?;
            }
            Ok(out.stages.segments)
        })
        .collect::<Result<Vec<_>>>()?;
    let records: Vec<PredictionRecord> = refs
        .iter()
        .zip(&outputs)
        .flat_map(|(r, segs)| segs.iter().map(|s| PredictionRecord::new(&r.query, s).with_episode(&r.id)))
        .collect();
    write_predictions(out, &records)?;
    println!("{} predictions for {} episodes -> {}", records.len(), refs.len(), out.display());
    Ok(())
}

pub fn cmd_train_heads(cfg: &RunConfig, dataset: &Path, out: &Path, trace_path: &Path) -> Result<()> {
    let ds = Dataset::load(dataset)?;
    let refs = select_episodes(&ds, cfg.train.episodes, Selection::Train)?;
    if refs.len() == ds.manifest.episodes.len() {
        log::warn!("all {} episodes are used for training; none are held out", refs.len());
    }
    let mut pipeline = Pipeline::new(cfg.clone())?;
    let trace = pipeline.train_refs(&ds, &refs)?;
    pipeline.save(out)?;
    write_file(trace_path, trace_csv(&trace).as_bytes())?;
    if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
        println!(
            "trained on {} episodes, {} steps: loss {:.6} -> {:.6}",
            refs.len(),
            trace.len(),
            first.total,
            last.total
        );
    }
    Ok(())
}

struct Unit {
    id: String,
    video: String,
    class: String,
}

/// Scores predictions. Without a dataset every distinct episode (or video)
/// in the prediction file is one unit; with one, the selected manifest
/// episodes are the units.
pub fn cmd_eval(
    cfg: &RunConfig,
    predictions: &Path,
    annotations: &Path,
    scope: Option<(&Path, Selection)>,
) -> Result<ProtocolReport> {
    cfg.eval.validate()?;
    let records = read_predictions(predictions)?;
    let ann = read_annotations(annotations, None)?;
    let mut warnings = Vec::new();
    let units: Vec<Unit> = match scope {
        Some((dir, selection)) => {
            let ds = Dataset::load(dir)?;
            select_episodes(&ds, cfg.train.episodes, selection)?
                .into_iter()
                .map(|r| Unit {
                    id: r.id.clone(),
                    video: r.query.clone(),
                    class: r.class.clone(),
                })
                .collect()
        }
        None => {
            let mut seen = BTreeMap::new();
            for r in &records {
                let id = r.episode.clone().unwrap_or_else(|| r.video.clone());
                seen.entry(id).or_insert_with(|| (r.video.clone(), r.class.clone()));
            }
            seen.into_iter()
                .map(|(id, (video, class))| Unit { id, video, class })
                .collect()
        }
    };
    let belongs = |r: &PredictionRecord, u: &Unit| match &r.episode {
        Some(e) => *e == u.id,
        None => r.video == u.video,
    };
    let mut used = 0;
    let mut results = Vec::with_capacity(units.len());
    for u in &units {
        let video = ann.get(&u.video).ok_or_else(|| Error::Annotation {
            context: format!("video {:?}", u.video),
            message: "not in the annotation file".into(),
        })?;
        let gts: Vec<(f64, f64)> = video
            .segments
            .iter()
            .filter(|s| s.class == u.class)
            .map(|s| s.segment().as_interval())
            .collect();
        let class = ClassId::parse(&u.class).unwrap_or(ClassId(0));
        let preds: Vec<SegmentPrediction> = records
            .iter()
            .filter(|r| belongs(r, u) && r.class == u.class)
            .map(|r| SegmentPrediction {
                start: r.start,
                end: r.end,
                score: r.score,
                class,
            })
            .collect();
        used += preds.len();
        results.push(EpisodeResult::score(&u.id, preds, gts, &cfg.eval));
    }
    if used < records.len() {
        let w = format!("{} predictions matched no scored episode", records.len() - used);
        log::warn!("{w}");
        warnings.push(w);
    }
    Ok(ProtocolReport::from_results(&results, &cfg.eval, warnings))
}
