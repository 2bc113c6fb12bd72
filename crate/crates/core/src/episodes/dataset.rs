//! On-disk dataset: a pool of untrimmed videos plus a manifest of sampled
//! episodes. Support clips are trimmed from other videos of the same class.
//!
//! Layout:
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/annotations.json
//! <dir>/features/<video>.fmit
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::io::{read_annotations, read_features, write_annotations, write_features};
use super::{synth_video, AnnotatedSegment, AnnotationDoc, ClassId, Episode, FeatureTensor, Segment, SynthSpec, VideoAnnotation};
use crate::container::{read_file, write_file};
use crate::error::{Error, Result};
use crate::numerics::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub train: Vec<ClassId>,
    pub val: Vec<ClassId>,
    pub test: Vec<ClassId>,
}

impl ClassSplit {
    pub fn split_of(&self, class: ClassId) -> Option<Split> {
        if self.train.contains(&class) {
            Some(Split::Train)
        } else if self.val.contains(&class) {
            Some(Split::Val)
        } else if self.test.contains(&class) {
            Some(Split::Test)
        } else {
            None
        }
    }

    pub fn classes(&self, split: Split) -> &[ClassId] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Seeded 7:2:1 partition of class ids.
pub fn split_classes(classes: &[ClassId], seed: u64) -> ClassSplit {
    let mut shuffled = classes.to_vec();
    shuffled.sort_unstable();
    shuffled.dedup();
    Rng::new(seed).shuffle(&mut shuffled);
    let n = shuffled.len();
    let mut n_train = (n as f64 * 0.7).round() as usize;
    let mut n_val = (n as f64 * 0.2).round() as usize;
    if n >= 3 {
        // keep at least one class in every split
        n_train = n_train.clamp(1, n - 2);
        n_val = n_val.clamp(1, n - n_train - 1);
    } else {
        n_train = n_train.min(n);
        n_val = n_val.min(n - n_train);
    }
    let sorted = |v: &[ClassId]| {
        let mut v = v.to_vec();
        v.sort_unstable();
        v
    };
    ClassSplit {
        train: sorted(&shuffled[..n_train]),
        val: sorted(&shuffled[n_train..n_train + n_val]),
        test: sorted(&shuffled[n_train + n_val..]),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoRecord {
    pub id: String,
    pub class: ClassId,
    pub features: FeatureTensor,
    pub segments: Vec<Segment>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SupportRef {
    pub video: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeRef {
    pub id: String,
    pub split: Split,
    pub class: String,
    pub query: String,
    pub support: Vec<SupportRef>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestVideo {
    pub id: String,
    pub class: String,
    pub file: String,
    pub duration: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub seed: u64,
    pub shot: usize,
    pub classes: Vec<String>,
    pub split: ClassSplit,
    pub videos: Vec<ManifestVideo>,
    pub episodes: Vec<EpisodeRef>,
}

pub const MANIFEST_FORMAT: &str = "fmital-dataset/1";

/// Draws `count` episodes from classes of `split` (all splits when `None`).
/// Classes with fewer than `shot + 1` videos are skipped; the returned
/// warnings name them.
pub fn sample_episodes(
    videos: &[VideoRecord],
    classes: &ClassSplit,
    split: Option<Split>,
    count: usize,
    shot: usize,
    seed: u64,
) -> Result<(Vec<EpisodeRef>, Vec<String>)> {
    let mut by_class: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
    for (i, v) in videos.iter().enumerate() {
        by_class.entry(v.class).or_default().push(i);
    }
    let wanted: Vec<Split> = match split {
        Some(s) => vec![s],
        None => vec![Split::Train, Split::Val, Split::Test],
    };
    let mut warnings = Vec::new();
    let mut eligible = Vec::new();
    for s in &wanted {
        for &c in classes.classes(*s) {
            let have = by_class.get(&c).map_or(0, Vec::len);
            if have < shot + 1 {
                warnings.push(format!(
                    "skipping {c}: {have} videos, {shot}-shot episodes need {}",
                    shot + 1
                ));
            } else {
                eligible.push((c, *s));
            }
        }
    }
    if eligible.is_empty() {
        return Ok((Vec::new(), warnings));
    }
    let mut rng = Rng::new(seed);
    let mut episodes = Vec::with_capacity(count);
    for k in 0..count {
        let (class, s) = eligible[rng.int_inclusive(0, eligible.len() - 1)];
        let pool = &by_class[&class];
        let q = pool[rng.int_inclusive(0, pool.len() - 1)];
        let mut others: Vec<usize> = pool.iter().copied().filter(|&i| i != q).collect();
        rng.shuffle(&mut others);
        let support = others[..shot]
            .iter()
            .map(|&i| {
                let v = &videos[i];
                let seg = v.segments[rng.int_inclusive(0, v.segments.len() - 1)];
                SupportRef {
                    video: v.id.clone(),
                    start: seg.start,
                    end: seg.end,
                }
            })
            .collect();
        episodes.push(EpisodeRef {
            id: format!("ep{k:04}"),
            split: s,
            class: class.name(),
            query: videos[q].id.clone(),
            support,
        });
    }
    Ok((episodes, warnings))
}

/// Generation parameters for a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenSpec {
    pub seed: u64,
    pub classes: u32,
    pub videos_per_class: usize,
    pub episodes: usize,
    pub shot: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    pub split_seed: u64,
    pub video: SynthSpec,
}

impl Default for GenSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            classes: 10,
            videos_per_class: 6,
            episodes: 50,
            shot: 1,
            min_instances: 1,
            max_instances: 3,
            split_seed: 2024,
            video: SynthSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub videos: Vec<VideoRecord>,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn generate(spec: &GenSpec) -> Result<Self> {
        if spec.episodes == 0 {
            return Err(Error::InvalidArgument("zero episodes requested".into()));
        }
        if spec.min_instances == 0 || spec.min_instances > spec.max_instances {
            return Err(Error::InvalidArgument(format!(
                "instance range {}..={}",
                spec.min_instances, spec.max_instances
            )));
        }
        let class_ids: Vec<ClassId> = (0..spec.classes).map(ClassId).collect();
        let split = split_classes(&class_ids, spec.split_seed);
        let mut videos = Vec::new();
        for &class in &class_ids {
            for v in 0..spec.videos_per_class {
                let index = videos.len() as u64;
                let mut rng = Rng::with_stream(spec.seed, index + 1);
                let instances = rng.int_inclusive(spec.min_instances, spec.max_instances);
                let vspec = SynthSpec {
                    class_id: class.0,
                    instances,
                    ..spec.video.clone()
                };
                let (features, segments) = synth_video(&mut rng, &vspec)?;
                videos.push(VideoRecord {
                    id: format!("v{:03}_{v:02}", class.0),
                    class,
                    features,
                    segments,
                });
            }
        }
        let (episodes, warnings) =
            sample_episodes(&videos, &split, None, spec.episodes, spec.shot, spec.seed)?;
        for w in warnings {
            log::warn!("{w}");
        }
        if episodes.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "no class has enough videos for {}-shot episodes",
                spec.shot
            )));
        }
        let manifest = Manifest {
            format: MANIFEST_FORMAT.into(),
            seed: spec.seed,
            shot: spec.shot,
            classes: class_ids.iter().map(|c| c.name()).collect(),
            split,
            videos: videos
                .iter()
                .map(|v| ManifestVideo {
                    id: v.id.clone(),
                    class: v.class.name(),
                    file: format!("features/{}.fmit", v.id),
                    duration: v.features.t(),
                })
                .collect(),
            episodes,
        };
        Ok(Self { videos, manifest })
    }

    pub fn annotations(&self) -> AnnotationDoc {
        self.videos
            .iter()
            .map(|v| {
                let segments = v
                    .segments
                    .iter()
                    .map(|s| AnnotatedSegment {
                        start: s.start as u64,
                        end: s.end as u64,
                        class: v.class.name(),
                    })
                    .collect();
                (
                    v.id.clone(),
                    VideoAnnotation {
                        duration: v.features.t() as u64,
                        segments,
                    },
                )
            })
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        for (v, mv) in self.videos.iter().zip(&self.manifest.videos) {
            write_features(&dir.join(&mv.file), &v.features)?;
        }
        write_annotations(&dir.join("annotations.json"), &self.annotations())?;
        let mut text = serde_json::to_string_pretty(&self.manifest)?;
        text.push('\n');
        write_file(&dir.join("manifest.json"), text.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_slice(&read_file(&dir.join("manifest.json"))?)?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(Error::InvalidArgument(format!(
                "unsupported manifest format {:?}",
                manifest.format
            )));
        }
        let annotations = read_annotations(&dir.join("annotations.json"), Some(&manifest.classes))?;
        let mut videos = Vec::with_capacity(manifest.videos.len());
        for mv in &manifest.videos {
            let class = ClassId::parse(&mv.class).ok_or_else(|| {
                Error::InvalidArgument(format!("video {}: bad class {:?}", mv.id, mv.class))
            })?;
            let features = read_features(&dir.join(&mv.file))?;
            let ann = annotations.get(&mv.id).ok_or_else(|| Error::Annotation {
                context: format!("video {:?}", mv.id),
                message: "missing from annotations.json".into(),
            })?;
            if ann.duration as usize != features.t() {
                return Err(Error::Annotation {
                    context: format!("video {:?}, field \"duration\"", mv.id),
                    message: format!("{} != feature length {}", ann.duration, features.t()),
                });
            }
            videos.push(VideoRecord {
                id: mv.id.clone(),
                class,
                features,
                segments: ann.segments.iter().map(AnnotatedSegment::segment).collect(),
            });
        }
        Ok(Self { videos, manifest })
    }

    pub fn video(&self, id: &str) -> Result<&VideoRecord> {
        self.videos
            .iter()
            .find(|v| v.id == id)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown video {id:?}")))
    }

    pub fn episodes(&self, split: Option<Split>) -> impl Iterator<Item = &EpisodeRef> {
        self.manifest
            .episodes
            .iter()
            .filter(move |e| split.map_or(true, |s| e.split == s))
    }

    pub fn materialize(&self, ep: &EpisodeRef) -> Result<Episode> {
        let class = ClassId::parse(&ep.class)
            .ok_or_else(|| Error::InvalidArgument(format!("episode {}: bad class {:?}", ep.id, ep.class)))?;
        let query = self.video(&ep.query)?;
        let support = ep
            .support
            .iter()
            .map(|s| {
                let seg = Segment::new(s.start, s.end)?;
                Ok((self.video(&s.video)?.features.trim(seg)?, class))
            })
            .collect::<Result<Vec<_>>>()?;
        Episode::new(
            support,
            query.features.clone(),
            query.segments.iter().map(|s| (*s, class)).collect(),
        )
    }
}
