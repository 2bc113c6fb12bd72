use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FeatureTensor, Segment};
use crate::container::{decode_features, encode_features, read_file, write_file};
use crate::error::{Error, Result};

pub fn write_features(path: &Path, features: &FeatureTensor) -> Result<()> {
    write_file(path, &encode_features(features.values())?)
}

pub fn read_features(path: &Path) -> Result<FeatureTensor> {
    FeatureTensor::new(decode_features(&read_file(path)?)?)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedSegment {
    pub start: u64,
    pub end: u64,
    pub class: String,
}

impl AnnotatedSegment {
    pub fn segment(&self) -> Segment {
        Segment {
            start: self.start as usize,
            end: self.end as usize,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoAnnotation {
    pub duration: u64,
    pub segments: Vec<AnnotatedSegment>,
}

/// Video id -> annotation, serialized as a JSON object.
pub type AnnotationDoc = BTreeMap<String, VideoAnnotation>;

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSegment {
    start: f64,
    end: f64,
    class: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawVideo {
    duration: f64,
    segments: Vec<RawSegment>,
}

fn whole_seconds(v: f64, context: impl Fn() -> String) -> Result<u64> {
    let err = |message: String| Error::Annotation {
        context: context(),
        message,
    };
    if !v.is_finite() {
        return Err(err(format!("{v} is not a finite time")));
    }
    if v < 0.0 {
        return Err(err(format!("negative time {v}")));
    }
    if v.fract() != 0.0 {
        return Err(err(format!("{v} is not a whole timestep")));
    }
    Ok(v as u64)
}

/// Parses and validates an annotation document. When `classes` is given,
/// every segment class must be one of them.
pub fn parse_annotations(text: &str, classes: Option<&[String]>) -> Result<AnnotationDoc> {
    let raw: BTreeMap<String, RawVideo> = serde_json::from_str(text).map_err(|e| Error::Annotation {
        context: format!("line {}, column {}", e.line(), e.column()),
        message: e.to_string(),
    })?;
    let mut doc = AnnotationDoc::new();
    for (video, rv) in raw {
        let duration = whole_seconds(rv.duration, || format!("video {video:?}, field \"duration\""))?;
        let mut segments = Vec::with_capacity(rv.segments.len());
        for (k, rs) in rv.segments.into_iter().enumerate() {
            let ctx = |field: &str| format!("video {video:?}, segment {k}, field {field:?}");
            let start = whole_seconds(rs.start, || ctx("start"))?;
            let end = whole_seconds(rs.end, || ctx("end"))?;
            if end < start {
                return Err(Error::Annotation {
                    context: ctx("end"),
                    message: format!("end {end} precedes start {start}"),
                });
            }
            if end >= duration {
                return Err(Error::Annotation {
                    context: ctx("end"),
                    message: format!("end {end} outside duration {duration}"),
                });
            }
            if let Some(known) = classes {
                if !known.iter().any(|c| *c == rs.class) {
                    return Err(Error::Annotation {
                        context: ctx("class"),
                        message: format!("unknown class id {:?}", rs.class),
                    });
                }
            }
            segments.push(AnnotatedSegment {
                start,
                end,
                class: rs.class,
            });
        }
        doc.insert(video, VideoAnnotation { duration, segments });
    }
    Ok(doc)
}

pub fn read_annotations(path: &Path, classes: Option<&[String]>) -> Result<AnnotationDoc> {
    let bytes = read_file(path)?;
    let text = std::str::from_utf8(&bytes).map_err(|e| Error::Annotation {
        context: path.display().to_string(),
        message: format!("not utf-8: {e}"),
    })?;
    parse_annotations(text, classes)
}

pub fn write_annotations(path: &Path, doc: &AnnotationDoc) -> Result<()> {
    let mut text = serde_json::to_string_pretty(doc)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}
