use fmital::boundary::{scp_refine, BoundaryDistributions, ScpConfig};
use fmital::config::RunConfig;
use fmital::episodes::{synth_episode, ClassId, Episode, FeatureTensor, SynthSpec};
use fmital::numerics::{softmax, RealArray, Rng};
use fmital::pipeline::Pipeline;

use super::{all, Check};

fn random_distribution(t: usize, rng: &mut Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..t).map(|_| 2.0 * rng.normal()).collect();
    softmax(&raw, &vec![true; t]).unwrap()
}

fn constant_query(t: usize, n: usize, d: usize, rng: &mut Rng) -> FeatureTensor {
    let frame: Vec<f32> = (0..n * d).map(|_| rng.normal() as f32).collect();
    FeatureTensor::from_vec(t, n, d, frame.repeat(t)).unwrap()
}

fn kept_or_halved(orig: &[f64], new: &[f64]) -> bool {
    orig.iter().zip(new).all(|(&o, &n)| n == o || n == o / 2.0)
}

/// Constant query features leave both distributions untouched, both in
/// isolation and inside the full pipeline.
pub fn constant_features() -> Check {
    let mut rng = Rng::new(404);
    for case in 0..100 {
        let t = rng.int_inclusive(2, 96);
        let q = constant_query(t, 2, 4, &mut rng);
        let (sp, ep) = (random_distribution(t, &mut rng), random_distribution(t, &mut rng));
        let cfg = ScpConfig {
            offset: rng.int_inclusive(1, 8),
            top_m: rng.int_inclusive(1, 120),
        };
        let (s2, e2) = scp_refine(&sp, &ep, &q, &cfg).map_err(|e| e.to_string())?;
        if s2 != sp || e2 != ep {
            return Err(format!("constant features: case {case} changed the distributions"));
        }
    }
    let cfg = RunConfig::default();
    let pipeline = Pipeline::new(cfg.clone()).map_err(|e| e.to_string())?;
    let (n, d) = (cfg.scr.n_patches, cfg.scr.channels);
    let query = constant_query(48, n, d, &mut rng);
    let support = FeatureTensor::new(RealArray::uniform(vec![16, n, d], 1.0, &mut rng)).unwrap();
    let ep = Episode::new(vec![(support, ClassId(0))], query, Vec::new()).map_err(|e| e.to_string())?;
    let out = pipeline.run_episode(&ep).map_err(|e| e.to_string())?;
    if out.refined != out.raw {
        return Err("constant features: pipeline refinement changed the distributions".into());
    }
    Ok("constant features: 100 cases plus one pipeline episode unchanged".into())
}

/// Identical frames except one orthogonal frame `k` near the end, so that
/// `k + offset` runs past the query: only start `k` and end `k - offset`
/// pair with it, and exactly those two entries are halved.
pub fn one_dissimilar_frame() -> Check {
    let mut rng = Rng::new(77);
    for case in 0..100 {
        let offset = rng.int_inclusive(1, 6);
        let t = rng.int_inclusive(offset + 3, 80);
        let k = rng.int_inclusive(offset.max(t - offset), t - 1);
        let d = 4;
        let mut data = Vec::with_capacity(t * d);
        for i in 0..t {
            data.extend_from_slice(if i == k { &[0.0, 0.0, 1.0, -1.0] } else { &[1.0, 1.0, 0.0, 0.0] });
        }
        let q = FeatureTensor::from_vec(t, 1, d, data).unwrap();
        let (sp, ep) = (random_distribution(t, &mut rng), random_distribution(t, &mut rng));
        let cfg = ScpConfig { offset, top_m: t };
        let (s2, e2) = scp_refine(&sp, &ep, &q, &cfg).map_err(|e| e.to_string())?;
        let touched_start: Vec<usize> = (0..t).filter(|&i| s2[i] != sp[i]).collect();
        let touched_end: Vec<usize> = (0..t).filter(|&i| e2[i] != ep[i]).collect();
        let exact = touched_start == [k]
            && touched_end == [k - offset]
            && s2[k] == sp[k] / 2.0
            && e2[k - offset] == ep[k - offset] / 2.0;
        if !exact {
            return Err(format!(
                "one dissimilar frame: case {case} (t={t}, k={k}, offset={offset}) touched starts {touched_start:?}, ends {touched_end:?}"
            ));
        }
    }
    Ok("one dissimilar frame: 100 fixtures halve exactly the targeted entries".into())
}

/// Refinement on real pipeline outputs only ever keeps or halves entries.
pub fn halving_only() -> Check {
    let cfg = RunConfig::default();
    let pipeline = Pipeline::new(cfg.clone()).map_err(|e| e.to_string())?;
    let spec = SynthSpec {
        instances: 2,
        ..cfg.data.video.clone()
    };
    let mut changed = 0;
    for seed in 0..100 {
        let ep = synth_episode(&mut Rng::new(seed), &spec).map_err(|e| e.to_string())?;
        let out = pipeline.run_episode(&ep).map_err(|e| e.to_string())?;
        let BoundaryDistributions { s_s, s_e, .. } = &out.refined;
        if !kept_or_halved(&out.raw.s_s, s_s) || !kept_or_halved(&out.raw.s_e, s_e) {
            return Err(format!("halving only: episode {seed} has an entry neither kept nor halved"));
        }
        changed += (out.raw != out.refined) as usize;
    }
    Ok(format!("halving only: 100 episodes, {changed} refined"))
}

pub fn suite() -> Check {
    all(vec![constant_features(), one_dissimilar_frame(), halving_only()])
}
