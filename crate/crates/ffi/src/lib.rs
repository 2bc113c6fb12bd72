//! C ABI over the fmital pipeline.
//!
//! Objects cross the boundary as opaque handles created by a `*_new`,
//! `*_load` or `*_generate` call and released by the matching `*_free`.
//! Every fallible call returns an [`FmitalStatus`]; on failure the message
//! is available from [`fmital_last_error_message`] on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use fmital::config::RunConfig;
use fmital::episodes::{ClassId, Dataset, Episode, FeatureTensor};
use fmital::localizer::SegmentPrediction;
use fmital::pipeline::Pipeline;
use fmital::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FmitalStatus {
    Ok = 0,
    /// A required pointer was null or an index was out of range.
    InvalidArgument = 1,
    /// Array extents disagree with the configuration.
    Shape = 2,
    /// File missing, unreadable or malformed.
    Data = 3,
    /// Configuration rejected.
    Config = 4,
    /// Non-finite values or diverged training.
    Numerical = 5,
    /// Internal panic caught at the boundary.
    Panic = 6,
}

/// One decoded segment, in timesteps.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FmitalSegment {
    pub start: f64,
    pub end: f64,
    pub score: f64,
    pub class_id: u32,
}

/// Opaque pipeline handle.
pub struct FmitalPipeline(Pipeline);

/// Opaque dataset handle.
pub struct FmitalDataset(Dataset);

/// Opaque list of segments.
pub struct FmitalSegments(Vec<FmitalSegment>);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> FmitalStatus {
    match err {
        Error::Shape { .. } | Error::QueryExceedsTmax { .. } => FmitalStatus::Shape,
        Error::Config(_) => FmitalStatus::Config,
        Error::NonFinite { .. } | Error::Diverged { .. } => FmitalStatus::Numerical,
        Error::InvalidArgument(_) | Error::NoValidPositions => FmitalStatus::InvalidArgument,
        _ => FmitalStatus::Data,
    }
}

struct Fail(FmitalStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn invalid(msg: &str) -> Fail {
    Fail(FmitalStatus::InvalidArgument, msg.to_string())
}

/// Runs `f`, records any failure and converts it to a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> FmitalStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            FmitalStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            FmitalStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(invalid(&format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(&format!("{what} is not UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| invalid(&format!("{what} is null")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| invalid(&format!("{what} is null")))
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

fn to_segments(preds: &[SegmentPrediction]) -> FmitalSegments {
    FmitalSegments(
        preds
            .iter()
            .map(|p| FmitalSegment {
                start: p.start,
                end: p.end,
                score: p.score,
                class_id: p.class.0,
            })
            .collect(),
    )
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn fmital_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn fmital_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a pipeline from a TOML document; null selects the defaults.
///
/// # Safety
/// `config_toml` is null or a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn fmital_pipeline_new(config_toml: *const c_char, out: *mut *mut FmitalPipeline) -> FmitalStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let cfg = if config_toml.is_null() {
            RunConfig::default()
        } else {
            RunConfig::from_toml(str_arg(config_toml, "config_toml")?)?
        };
        *out = boxed(FmitalPipeline(Pipeline::new(cfg)?));
        Ok(())
    })
}

/// # Safety
/// `pipeline` is null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fmital_pipeline_free(pipeline: *mut FmitalPipeline) {
    if !pipeline.is_null() {
        drop(Box::from_raw(pipeline));
    }
}

/// Replaces the pipeline's parameters with those in a checkpoint file.
///
/// # Safety
/// Valid handle and NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn fmital_pipeline_load_checkpoint(pipeline: *mut FmitalPipeline, path: *const c_char) -> FmitalStatus {
    guard(|| {
        let p = out_arg(pipeline, "pipeline")?;
        let path = PathBuf::from(str_arg(path, "path")?);
        p.0 = Pipeline::from_checkpoint(p.0.config.clone(), &path)?;
        Ok(())
    })
}

/// # Safety
/// Valid handle and NUL-terminated path.
#[no_mangle]
pub unsafe extern "C" fn fmital_pipeline_save_checkpoint(pipeline: *const FmitalPipeline, path: *const c_char) -> FmitalStatus {
    guard(|| {
        let p = ref_arg(pipeline, "pipeline")?;
        p.0.save(&PathBuf::from(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Synthesizes the dataset described by the pipeline's configuration.
///
/// # Safety
/// Valid handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn fmital_dataset_generate(pipeline: *const FmitalPipeline, out: *mut *mut FmitalDataset) -> FmitalStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let p = ref_arg(pipeline, "pipeline")?;
        *out = boxed(FmitalDataset(Dataset::generate(&p.0.config.data)?));
        Ok(())
    })
}

/// # Safety
/// NUL-terminated directory path; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn fmital_dataset_load(dir: *const c_char, out: *mut *mut FmitalDataset) -> FmitalStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let dir = PathBuf::from(str_arg(dir, "dir")?);
        *out = boxed(FmitalDataset(Dataset::load(&dir)?));
        Ok(())
    })
}

/// # Safety
/// Valid handle and NUL-terminated directory path.
#[no_mangle]
pub unsafe extern "C" fn fmital_dataset_save(dataset: *const FmitalDataset, dir: *const c_char) -> FmitalStatus {
    guard(|| {
        let ds = ref_arg(dataset, "dataset")?;
        ds.0.save(&PathBuf::from(str_arg(dir, "dir")?))?;
        Ok(())
    })
}

/// Number of episodes in the manifest; 0 for a null handle.
///
/// # Safety
/// `dataset` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fmital_dataset_episode_count(dataset: *const FmitalDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.0.manifest.episodes.len())
}

/// # Safety
/// `dataset` is null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fmital_dataset_free(dataset: *mut FmitalDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

fn episode_range(ds: &Dataset, first: usize, count: usize) -> Result<Vec<&fmital::episodes::EpisodeRef>, Fail> {
    let all = &ds.manifest.episodes;
    match first.checked_add(count) {
        Some(end) if count > 0 && end <= all.len() => Ok(all[first..end].iter().collect()),
        _ => Err(invalid(&format!(
            "episode range {first}+{count} outside 0..{}",
            all.len()
        ))),
    }
}

/// Trains the boundary heads on manifest episodes `first..first+count`.
/// `final_loss` may be null.
///
/// # Safety
/// Valid handles; `final_loss` is null or writable.
#[no_mangle]
pub unsafe extern "C" fn fmital_pipeline_train(
    pipeline: *mut FmitalPipeline,
    dataset: *const FmitalDataset,
    first: usize,
    count: usize,
    final_loss: *mut f64,
) -> FmitalStatus {
    guard(|| {
        let p = out_arg(pipeline, "pipeline")?;
        let ds = ref_arg(dataset, "dataset")?;
        let refs = episode_range(&ds.0, first, count)?;
        let trace = p.0.train_refs(&ds.0, &refs)?;
        if let Some(out) = final_loss.as_mut() {
            *out = trace.last().map_or(f64::NAN, |b| b.total);
        }
        Ok(())
    })
}

/// mAP at the primary threshold and averaged over all thresholds, on
/// manifest episodes `first..first+count`. Either output may be null.
///
/// # Safety
/// Valid handles; outputs null or writable.
#[no_mangle]
pub unsafe extern "C" fn fmital_pipeline_evaluate(
    pipeline: *const FmitalPipeline,
    dataset: *const FmitalDataset,
    first: usize,
    count: usize,
    map_primary: *mut f64,
    map_mean: *mut f64,
) -> FmitalStatus {
    guard(|| {
        let p = ref_arg(pipeline, "pipeline")?;
        let ds = ref_arg(dataset, "dataset")?;
        let refs = episode_range(&ds.0, first, count)?;
        let report = p.0.evaluate_refs(&ds.0, &refs)?;
        if let Some(out) = map_primary.as_mut() {
            *out = report.all.map_primary;
        }
        if let Some(out) = map_mean.as_mut() {
            *out = report.all.mean;
        }
        Ok(())
    })
}

/// Localizes segments in one manifest episode.
///
/// # Safety
/// Valid handles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn fmital_pipeline_predict_episode(
    pipeline: *const FmitalPipeline,
    dataset: *const FmitalDataset,
    episode: usize,
    out: *mut *mut FmitalSegments,
) -> FmitalStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let p = ref_arg(pipeline, "pipeline")?;
        let ds = ref_arg(dataset, "dataset")?;
        let r = episode_range(&ds.0, episode, 1)?[0];
        let ep = ds.0.materialize(r)?;
        *out = boxed(to_segments(&p.0.predict(&ep)?));
        Ok(())
    })
}

/// Localizes segments in raw features. `query` holds `[t_query, n, d]` and
/// `support` holds `[t_support, n, d]` row-major floats, with `n` and `d`
/// taken from the pipeline configuration. `class_id` labels the output.
///
/// # Safety
/// The arrays hold at least the stated number of floats; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn fmital_pipeline_predict_features(
    pipeline: *const FmitalPipeline,
    query: *const f32,
    t_query: usize,
    support: *const f32,
    t_support: usize,
    class_id: u32,
    out: *mut *mut FmitalSegments,
) -> FmitalStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let p = ref_arg(pipeline, "pipeline")?;
        if query.is_null() || support.is_null() {
            return Err(invalid("feature pointer is null"));
        }
        let (n, d) = (p.0.config.scr.n_patches, p.0.config.scr.channels);
        let tensor = |data: *const f32, t: usize| -> Result<FeatureTensor, Fail> {
            let len = t
                .checked_mul(n * d)
                .ok_or_else(|| invalid("feature extent overflows"))?;
            let values = std::slice::from_raw_parts(data, len).to_vec();
            Ok(FeatureTensor::from_vec(t, n, d, values)?)
        };
        let class = ClassId(class_id);
        let ep = Episode::new(vec![(tensor(support, t_support)?, class)], tensor(query, t_query)?, Vec::new())?;
        *out = boxed(to_segments(&p.0.predict(&ep)?));
        Ok(())
    })
}

/// Number of segments; 0 for a null handle.
///
/// # Safety
/// `segments` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fmital_segments_len(segments: *const FmitalSegments) -> usize {
    segments.as_ref().map_or(0, |s| s.0.len())
}

/// Copies segment `index` (rank order, best first) into `out`.
///
/// # Safety
/// Valid handle; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn fmital_segments_get(segments: *const FmitalSegments, index: usize, out: *mut FmitalSegment) -> FmitalStatus {
    guard(|| {
        let s = ref_arg(segments, "segments")?;
        let out = out_arg(out, "out")?;
        *out = *s
            .0
            .get(index)
            .ok_or_else(|| invalid(&format!("segment {index} of {}", s.0.len())))?;
        Ok(())
    })
}

/// # Safety
/// `segments` is null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn fmital_segments_free(segments: *mut FmitalSegments) {
    if !segments.is_null() {
        drop(Box::from_raw(segments));
    }
}
