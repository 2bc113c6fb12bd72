use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use sha2::{Digest, Sha256};

use fmital::ablation::{run_ablation, AblationTable};
use fmital::config::RunConfig;
use fmital::episodes::{synth_episode, Dataset, SynthSpec};
use fmital::localizer::tiou;
use fmital::numerics::Rng;
use fmital::pipeline::{holdout_experiment, Pipeline};
use fmital::supervision::kl_loss;

use super::Check;

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Heads trained on a single synthetic episode fit its labels and decode
/// its instance.
pub fn overfit_one_episode() -> Check {
    let ep = synth_episode(&mut Rng::new(11), &SynthSpec::default()).map_err(err)?;
    let cfg = RunConfig::default();
    let mut p = Pipeline::new(cfg.clone()).map_err(err)?;
    let trace = p.train(std::slice::from_ref(&ep)).map_err(err)?;
    let sample = &p.samples(std::slice::from_ref(&ep)).map_err(err)?[0];
    let bd = p.distributions(&ep).map_err(err)?;
    let eps = cfg.labels.epsilon;
    let kl = kl_loss(&bd.s_s, &sample.labels.p_s, eps).map_err(err)? + kl_loss(&bd.s_e, &sample.labels.p_e, eps).map_err(err)?;
    let top = p.predict(&ep).map_err(err)?.first().copied().ok_or("no segment decoded")?;
    let gt = ep.segments()[0];
    let overlap = tiou(top.interval(), gt.as_interval());
    let summary = format!(
        "{} steps, KL(start)+KL(end) {kl:.4}, top-1 [{}, {}] vs [{}, {}], tIoU {overlap:.3}",
        trace.len(),
        top.start,
        top.end,
        gt.start,
        gt.end
    );
    if kl < 0.05 && overlap >= 0.9 {
        Ok(summary)
    } else {
        Err(summary)
    }
}

/// Trains on the first 40 of 50 generated episodes and scores the other 10,
/// before and after training.
pub fn synthetic_end_to_end() -> Check {
    let cfg = RunConfig::default();
    let ds = Dataset::generate(&cfg.data).map_err(err)?;
    let out = holdout_experiment(&cfg, &ds).map_err(err)?;
    let (trained, untrained) = (out.trained.all.map_primary, out.untrained.all.map_primary);
    let summary = format!(
        "{} episodes, train {} / test {}: mAP@0.5 {trained:.3} trained vs {untrained:.3} untrained",
        ds.manifest.episodes.len(),
        cfg.train.episodes,
        out.trained.all.episodes
    );
    if trained >= 0.7 && trained > untrained {
        Ok(summary)
    } else {
        Err(summary)
    }
}

/// The component ablation table yields six finite rows.
pub fn ablation_rows() -> Check {
    let report = run_ablation(&RunConfig::default(), None, &[AblationTable::Component]).map_err(err)?;
    let rows: Vec<_> = report.rows_of(AblationTable::Component).collect();
    let finite = rows.iter().all(|r| r.map_primary.is_finite() && r.mean.is_finite() && r.final_loss.is_finite());
    let labels: Vec<&str> = rows.iter().map(|r| r.row.as_str()).collect();
    let summary = format!(
        "{} rows: {}",
        rows.len(),
        rows.iter().map(|r| format!("{} {:.3}", r.row, r.map_primary)).collect::<Vec<_>>().join(", ")
    );
    let want = ["none", "SCP", "ICD+SCP", "SCA+SCP", "SCA+ICD", "SCA+ICD+SCP"];
    if rows.len() == 6 && finite && labels == want && report.table().lines().count() == 7 {
        Ok(summary)
    } else {
        Err(summary)
    }
}

pub fn binary() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_fmital"))
}

/// Runs the binary, failing on a non-zero exit.
pub fn fmital(args: &[&str]) -> Result<String, String> {
    let out = Command::new(binary()).args(args).output().map_err(err)?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!(
            "fmital {} exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

/// SHA-256 over every file under `root`, in path order, keyed by the
/// relative path.
pub fn tree_digest(root: &Path) -> String {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) {
        let mut entries: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(&p, out);
            } else {
                out.push(p);
            }
        }
    }
    let mut files = Vec::new();
    if root.is_dir() {
        walk(root, &mut files);
    } else {
        files.push(root.to_path_buf());
    }
    let mut h = Sha256::new();
    for f in files {
        h.update(f.strip_prefix(root).unwrap_or(&f).to_string_lossy().as_bytes());
        h.update([0]);
        h.update(fs::read(&f).unwrap());
    }
    format!("{:x}", h.finalize())
}

/// `gen`, `run` and `train-heads` twice each with the same seed, at
/// different thread counts; all outputs must be byte-identical.
pub fn cli_determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(err)?;
    let dir = |name: &str| tmp.path().join(name);
    let s = |p: &PathBuf| p.to_string_lossy().into_owned();
    let mut digests = Vec::new();
    for (round, jobs) in [(0, "1"), (1, "2")] {
        let data = dir(&format!("data{round}"));
        let ckpt = dir(&format!("heads{round}.bin"));
        let trace = dir(&format!("trace{round}.csv"));
        let preds = dir(&format!("preds{round}.jsonl"));
        let dump = dir(&format!("dump{round}"));
        fmital(&["--seed", "7", "-j", jobs, "gen", "--out", &s(&data)])?;
        fmital(&["--seed", "7", "-j", jobs, "train-heads", "--dataset", &s(&data), "--out", &s(&ckpt), "--trace", &s(&trace)])?;
        fmital(&[
            "--seed", "7", "-j", jobs, "run", "--dataset", &s(&data), "--checkpoint", &s(&ckpt), "--out", &s(&preds),
            "--dump-dir", &s(&dump),
        ])?;
        digests.push([&data, &ckpt, &trace, &preds, &dump].map(|p| tree_digest(p)));
    }
    let names = ["gen", "train-heads checkpoint", "train-heads trace", "run predictions", "run dumps"];
    let differing: Vec<&str> = names.iter().zip(digests[0].iter().zip(&digests[1])).filter(|(_, (a, b))| a != b).map(|(n, _)| *n).collect();
    if differing.is_empty() {
        Ok(format!("gen, train-heads and run byte-identical across two runs (gen {})", &digests[0][0][..12]))
    } else {
        Err(format!("outputs differ: {}", differing.join(", ")))
    }
}
