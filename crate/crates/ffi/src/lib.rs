//! C ABI over the detection pipeline.
//!
//! Objects are opaque handles created by `spc_*_load`/`spc_*_extract`/`spc_predict`
//! and released with the matching `spc_*_free`. Every fallible call returns an
//! [`SpcStatus`]; on failure `spc_last_error()` describes what went wrong on the
//! calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use spinecade::convnet::{load_model, ConvNetModel, NetError};
use spinecade::detector::{predict_map, DetectError, ProbabilityMap, DEFAULT_BATCH_SIZE};
use spinecade::edgemap::{extract_edges, EdgeError, EdgeMap};
use spinecade::evaluation::{roc, EvalError};
use spinecade::patch::{SamplerConfig, Strategy};
use spinecade::pipeline::{cmd_run_all, PipelineConfig, PipelineError, RunLock};
use spinecade::volume::{load_volume, Volume, VolumeError};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpcStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Malformed = 4,
    ConfigInvalid = 5,
    MissingArtifact = 6,
    Locked = 7,
    Failed = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpcStrategy {
    Original = 0,
    Mirrored = 1,
    Oriented = 2,
}

impl From<SpcStrategy> for Strategy {
    fn from(s: SpcStrategy) -> Self {
        match s {
            SpcStrategy::Original => Strategy::Original,
            SpcStrategy::Mirrored => Strategy::Mirrored,
            SpcStrategy::Oriented => Strategy::Oriented,
        }
    }
}

pub struct SpcVolume(Volume);
pub struct SpcEdgeMap(EdgeMap);
pub struct SpcModel(ConvNetModel<f32>);
pub struct SpcProbabilityMap(ProbabilityMap);

struct Failure(SpcStatus, String);

impl From<VolumeError> for Failure {
    fn from(e: VolumeError) -> Self {
        let status = match e {
            VolumeError::MissingFile(_) | VolumeError::Io(_) => SpcStatus::Io,
            VolumeError::Invalid(_) => SpcStatus::InvalidArgument,
            _ => SpcStatus::Malformed,
        };
        Failure(status, e.to_string())
    }
}

impl From<EdgeError> for Failure {
    fn from(e: EdgeError) -> Self {
        let status = match e {
            EdgeError::Io(_) => SpcStatus::Io,
            EdgeError::Malformed(_) => SpcStatus::Malformed,
            _ => SpcStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

impl From<NetError> for Failure {
    fn from(e: NetError) -> Self {
        let status = match e {
            NetError::Io(_) => SpcStatus::Io,
            NetError::VersionMismatch(_) | NetError::ChecksumMismatch | NetError::Malformed(_) => SpcStatus::Malformed,
            _ => SpcStatus::InvalidArgument,
        };
        Failure(status, e.to_string())
    }
}

impl From<DetectError> for Failure {
    fn from(e: DetectError) -> Self {
        Failure(SpcStatus::InvalidArgument, e.to_string())
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        Failure(SpcStatus::InvalidArgument, e.to_string())
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        let status = match e {
            PipelineError::ConfigInvalid(_) => SpcStatus::ConfigInvalid,
            PipelineError::MissingUpstreamArtifact(_) => SpcStatus::MissingArtifact,
            PipelineError::Locked(_) => SpcStatus::Locked,
            PipelineError::Io(_) => SpcStatus::Io,
            _ => SpcStatus::Failed,
        };
        Failure(status, e.to_string())
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SpcStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            SpcStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_last_error(&msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic");
            SpcStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(SpcStatus::NullPointer, format!("{what} is null"))
}

unsafe fn arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| Failure(SpcStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Failure> {
    if out.is_null() {
        return Err(null("out"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn spc_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread; empty after a success.
/// Valid until the next `spc_*` call on the same thread.
#[no_mangle]
pub extern "C" fn spc_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Load a MetaImage volume from its `.mhd` header.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spc_volume_load(path: *const c_char, out: *mut *mut SpcVolume) -> SpcStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        put(out, SpcVolume(load_volume(&path)?))
    })
}

/// # Safety
/// `v` must come from `spc_volume_load`; `dims` and `spacing` may be null or point to 3 elements.
#[no_mangle]
pub unsafe extern "C" fn spc_volume_geometry(v: *const SpcVolume, dims: *mut usize, spacing: *mut f64) -> SpcStatus {
    guard(|| {
        let v = &arg(v, "volume")?.0;
        if !dims.is_null() {
            ptr::copy_nonoverlapping(v.dims().as_ptr(), dims, 3);
        }
        if !spacing.is_null() {
            ptr::copy_nonoverlapping(v.spacing().as_ptr(), spacing, 3);
        }
        Ok(())
    })
}

/// # Safety
/// `v` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn spc_volume_free(v: *mut SpcVolume) {
    free(v)
}

/// Edge candidates of `image` inside `mask`.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spc_edges_extract(
    image: *const SpcVolume,
    mask: *const SpcVolume,
    threshold_percentile: f64,
    out: *mut *mut SpcEdgeMap,
) -> SpcStatus {
    guard(|| {
        let image = &arg(image, "image")?.0;
        let mask = &arg(mask, "mask")?.0;
        put(out, SpcEdgeMap(extract_edges(image, mask, threshold_percentile)?))
    })
}

/// Number of edge voxels; 0 for a null handle.
///
/// # Safety
/// `e` must be null or live.
#[no_mangle]
pub unsafe extern "C" fn spc_edges_len(e: *const SpcEdgeMap) -> usize {
    e.as_ref().map_or(0, |e| e.0.len())
}

/// Voxel index (x, y, z) of edge voxel `i`.
///
/// # Safety
/// `e` must be live; `index` must point to 3 writable elements.
#[no_mangle]
pub unsafe extern "C" fn spc_edges_get(e: *const SpcEdgeMap, i: usize, index: *mut usize) -> SpcStatus {
    guard(|| {
        let e = &arg(e, "edge map")?.0;
        if index.is_null() {
            return Err(null("index"));
        }
        let v = e.voxels.get(i).ok_or_else(|| {
            Failure(SpcStatus::InvalidArgument, format!("edge {i} out of range (len {})", e.len()))
        })?;
        ptr::copy_nonoverlapping(v.index.as_ptr(), index, 3);
        Ok(())
    })
}

/// # Safety
/// `e` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn spc_edges_free(e: *mut SpcEdgeMap) {
    free(e)
}

/// Load a trained checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spc_model_load(path: *const c_char, out: *mut *mut SpcModel) -> SpcStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        put(out, SpcModel(load_model(&path)?))
    })
}

/// # Safety
/// `m` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn spc_model_free(m: *mut SpcModel) {
    free(m)
}

/// Fracture probability for every edge voxel, with default sampler settings.
///
/// # Safety
/// Handles must be live; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spc_predict(
    model: *const SpcModel,
    image: *const SpcVolume,
    edges: *const SpcEdgeMap,
    strategy: SpcStrategy,
    out: *mut *mut SpcProbabilityMap,
) -> SpcStatus {
    guard(|| {
        let model = &arg(model, "model")?.0;
        let image = &arg(image, "image")?.0;
        let edges = &arg(edges, "edge map")?.0;
        let map = predict_map(model, image, edges, strategy.into(), &SamplerConfig::default(), DEFAULT_BATCH_SIZE)?;
        put(out, SpcProbabilityMap(map))
    })
}

/// # Safety
/// `p` must be null or live.
#[no_mangle]
pub unsafe extern "C" fn spc_probability_map_len(p: *const SpcProbabilityMap) -> usize {
    p.as_ref().map_or(0, |p| p.0.entries.len())
}

/// Entry `i`: voxel index (x, y, z) and probability.
///
/// # Safety
/// `p` must be live; `index` must point to 3 writable elements; `prob` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spc_probability_map_get(
    p: *const SpcProbabilityMap,
    i: usize,
    index: *mut usize,
    prob: *mut f64,
) -> SpcStatus {
    guard(|| {
        let p = &arg(p, "probability map")?.0;
        if index.is_null() || prob.is_null() {
            return Err(null("output"));
        }
        let (idx, pr) = p.entries.get(i).ok_or_else(|| {
            Failure(SpcStatus::InvalidArgument, format!("entry {i} out of range (len {})", p.entries.len()))
        })?;
        ptr::copy_nonoverlapping(idx.as_ptr(), index, 3);
        *prob = *pr;
        Ok(())
    })
}

/// # Safety
/// `p` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn spc_probability_map_free(p: *mut SpcProbabilityMap) {
    free(p)
}

/// Area under the ROC curve; `labels[i]` nonzero marks a positive.
///
/// # Safety
/// `scores` and `labels` must point to `n` elements; `auc` must be writable.
#[no_mangle]
pub unsafe extern "C" fn spc_roc_auc(scores: *const f64, labels: *const u8, n: usize, auc: *mut f64) -> SpcStatus {
    guard(|| {
        if scores.is_null() || labels.is_null() || auc.is_null() {
            return Err(null("argument"));
        }
        let s = std::slice::from_raw_parts(scores, n);
        let l = std::slice::from_raw_parts(labels, n);
        let pairs: Vec<(f64, bool)> = s.iter().zip(l).map(|(&s, &l)| (s, l != 0)).collect();
        *auc = roc(&pairs)?.auc;
        Ok(())
    })
}

/// Run every pipeline stage for the configured strategy.
/// `overrides` holds `n_overrides` strings of the form `key=value`.
/// On success `auc` (if non-null) receives the test-set ROC AUC.
///
/// # Safety
/// `config_path` must be a NUL-terminated string; `overrides` must point to
/// `n_overrides` NUL-terminated strings (or be null when `n_overrides` is 0).
#[no_mangle]
pub unsafe extern "C" fn spc_run_all(
    config_path: *const c_char,
    overrides: *const *const c_char,
    n_overrides: usize,
    auc: *mut f64,
) -> SpcStatus {
    guard(|| {
        let path = path_arg(config_path, "config_path")?;
        if n_overrides > 0 && overrides.is_null() {
            return Err(null("overrides"));
        }
        let mut kv = Vec::with_capacity(n_overrides);
        for i in 0..n_overrides {
            let raw = path_arg(*overrides.add(i), "override")?;
            let raw = raw.to_string_lossy();
            let (k, v) = raw
                .split_once('=')
                .ok_or_else(|| Failure(SpcStatus::ConfigInvalid, format!("override {raw:?}: expected key=value")))?;
            kv.push((k.to_string(), v.to_string()));
        }
        let cfg = PipelineConfig::load(&path, &kv)?;
        let _lock = RunLock::acquire(&cfg.output_dir)?;
        let rows = cmd_run_all(&cfg, &[cfg.sampling.strategy])?;
        if !auc.is_null() {
            *auc = rows[0].summary.auc;
        }
        Ok(())
    })
}
