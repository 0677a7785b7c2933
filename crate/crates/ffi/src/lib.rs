//! C ABI over `diffvad`.
//!
//! Every fallible call returns a [`DvStatus`]; on failure the message is
//! available from [`dv_last_error`] on the same thread until the next call.
//! Handles are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use diffvad::data::{synth_generate, FeatureSet, SynthConfig};
use diffvad::network::{Checkpoint, Denoiser, Model};
use diffvad::numeric::Tensor2;
use diffvad::sampler::{karras_schedule, noise_bounds, ScheduleConfig, DEFAULT_LMS_ORDER};
use diffvad::scoring::{batch_threshold, score_dataset, ScoreTable, ScoringConfig};
use diffvad::training::TrainNoiseConfig;
use diffvad::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DvStatus {
    Ok = 0,
    InvalidArgument = 1,
    DataError = 2,
    Numeric = 3,
    NullPointer = 4,
    UndefinedAuc = 5,
    Panic = 6,
}

pub struct DvFeatureSet(FeatureSet);
pub struct DvModel(Checkpoint);
pub struct DvScores(ScoreTable);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> DvStatus {
    match e {
        Error::InvalidArgument(_) | Error::DimensionMismatch { .. } => DvStatus::InvalidArgument,
        Error::Numeric(_) => DvStatus::Numeric,
        Error::UndefinedAuc(_) => DvStatus::UndefinedAuc,
        _ => DvStatus::DataError,
    }
}

struct Fail(DvStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(DvStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DvStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DvStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            DvStatus::Panic
        }
    }
}

unsafe fn path_arg<'a>(p: *const c_char, what: &str) -> Result<&'a Path, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(DvStatus::InvalidArgument, format!("{what} is not UTF-8")))?;
    Ok(Path::new(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

/// Message for the last failed call on this thread, or null. Valid until
/// the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn dv_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `features` and `manifest` must be NUL-terminated paths; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dv_featureset_load(
    features: *const c_char,
    manifest: *const c_char,
    out: *mut *mut DvFeatureSet,
) -> DvStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let fs = FeatureSet::load(path_arg(features, "features")?, path_arg(manifest, "manifest")?)?;
        *out = boxed(DvFeatureSet(fs));
        Ok(())
    })
}

/// Synthetic set with the library defaults except the given fields.
///
/// # Safety
/// `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dv_featureset_synth(
    n_normal: usize,
    n_anomalous: usize,
    dim: usize,
    shift: f64,
    seed: u64,
    out: *mut *mut DvFeatureSet,
) -> DvStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let fs = synth_generate(&SynthConfig {
            n_normal,
            n_anomalous,
            dim,
            shift,
            seed,
            ..SynthConfig::default()
        })?;
        *out = boxed(DvFeatureSet(fs));
        Ok(())
    })
}

/// # Safety
/// `fs` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn dv_featureset_len(fs: *const DvFeatureSet) -> usize {
    fs.as_ref().map_or(0, |f| f.0.len())
}

/// # Safety
/// `fs` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn dv_featureset_dim(fs: *const DvFeatureSet) -> usize {
    fs.as_ref().map_or(0, |f| f.0.dim())
}

/// # Safety
/// `fs` must come from this library or be null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn dv_featureset_free(fs: *mut DvFeatureSet) {
    if !fs.is_null() {
        drop(Box::from_raw(fs));
    }
}

/// # Safety
/// `path` must be a NUL-terminated path; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dv_model_load(path: *const c_char, out: *mut *mut DvModel) -> DvStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let ck = Checkpoint::load(path_arg(path, "path")?)?;
        *out = boxed(DvModel(ck));
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn dv_model_input_dim(model: *const DvModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.params.config().input_dim)
}

/// `D(x; σ)` for a row-major `rows × cols` block, written to `out`
/// (same size). Inputs are in the model's training space (after any
/// centering recorded in the checkpoint).
///
/// # Safety
/// `x` and `out` must hold `rows * cols` doubles.
#[no_mangle]
pub unsafe extern "C" fn dv_model_denoise(
    model: *const DvModel,
    x: *const f64,
    rows: usize,
    cols: usize,
    sigma: f64,
    use_ema: bool,
    out: *mut f64,
) -> DvStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Fail(DvStatus::InvalidArgument, "rows * cols overflows".into()))?;
        let input = Tensor2::from_vec(rows, cols, slice_arg(x, n, "x")?.to_vec())?;
        if n > 0 && out.is_null() {
            return Err(null("out"));
        }
        let ck = &m.0;
        let model = Model {
            params: if use_ema { ck.ema.clone() } else { ck.params.clone() },
            precond: ck.preconditioner()?,
        };
        let d = model.denoise(&input, sigma)?;
        if n > 0 {
            std::slice::from_raw_parts_mut(out, n).copy_from_slice(d.data());
        }
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library or be null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn dv_model_free(model: *mut DvModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Scoring parameters. A non-positive `sigma_min`/`sigma_max` means
/// "derive from the checkpoint's training noise".
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct DvScoreParams {
    pub steps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub start_t: usize,
    pub k: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub use_ema: bool,
}

/// Defaults: T = 10, bounds from training noise, ρ = 7, t = T − 1, k = 1.
#[no_mangle]
pub extern "C" fn dv_score_params_default() -> DvScoreParams {
    DvScoreParams {
        steps: 10,
        sigma_min: 0.0,
        sigma_max: 0.0,
        rho: 7.0,
        start_t: 9,
        k: 1.0,
        batch_size: 8192,
        seed: 0,
        use_ema: true,
    }
}

/// # Safety
/// `model`, `fs` and `out` must be valid; `params` may be null for defaults.
#[no_mangle]
pub unsafe extern "C" fn dv_score_dataset(
    model: *const DvModel,
    fs: *const DvFeatureSet,
    params: *const DvScoreParams,
    out: *mut *mut DvScores,
) -> DvStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let ck = &model.as_ref().ok_or_else(|| null("model"))?.0;
        let fs = &fs.as_ref().ok_or_else(|| null("fs"))?.0;
        let p = params.as_ref().copied().unwrap_or_else(|| dv_score_params_default());
        let (lo, hi) = noise_bounds(&TrainNoiseConfig::new(ck.meta.p_mean, ck.meta.p_std)?);
        let sc = ScheduleConfig::new(
            p.steps,
            if p.sigma_min > 0.0 { p.sigma_min } else { lo },
            if p.sigma_max > 0.0 { p.sigma_max } else { hi },
            p.rho,
        )?;
        let cfg = ScoringConfig {
            start_t: p.start_t,
            k: p.k,
            batch_size: p.batch_size,
            order: DEFAULT_LMS_ORDER,
        };
        let table = score_dataset(ck, &karras_schedule(&sc)?, &cfg, fs, p.use_ema, p.seed)?;
        *out = boxed(DvScores(table));
        Ok(())
    })
}

/// # Safety
/// `scores` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn dv_scores_len(scores: *const DvScores) -> usize {
    scores.as_ref().map_or(0, |s| s.0.rows.len())
}

/// Copies up to `len` per-segment MSE values and 0/1 flags in manifest
/// order. Either output may be null to skip it.
///
/// # Safety
/// Non-null outputs must hold `len` elements.
#[no_mangle]
pub unsafe extern "C" fn dv_scores_copy(
    scores: *const DvScores,
    mse: *mut f64,
    flags: *mut u8,
    len: usize,
) -> DvStatus {
    guard(|| {
        let s = &scores.as_ref().ok_or_else(|| null("scores"))?.0;
        if len != s.rows.len() {
            return Err(Fail(
                DvStatus::InvalidArgument,
                format!("buffer holds {len} entries, scores have {}", s.rows.len()),
            ));
        }
        for (i, row) in s.rows.iter().enumerate() {
            if !mse.is_null() {
                *mse.add(i) = row.mse;
            }
            if !flags.is_null() {
                *flags.add(i) = row.flagged;
            }
        }
        Ok(())
    })
}

/// Frame-level AUC of `scores` against the labels in `fs`'s manifest.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn dv_scores_evaluate(
    scores: *const DvScores,
    fs: *const DvFeatureSet,
    auc: *mut f64,
) -> DvStatus {
    guard(|| {
        let s = &scores.as_ref().ok_or_else(|| null("scores"))?.0;
        let fs = &fs.as_ref().ok_or_else(|| null("fs"))?.0;
        let out = out_arg(auc, "auc")?;
        *out = diffvad::eval::evaluate(s, &fs.manifest)?.auc;
        Ok(())
    })
}

/// # Safety
/// `scores` must come from this library or be null; it is invalid afterwards.
#[no_mangle]
pub unsafe extern "C" fn dv_scores_free(scores: *mut DvScores) {
    if !scores.is_null() {
        drop(Box::from_raw(scores));
    }
}

/// # Safety
/// `scores` and `labels` must hold `n` elements; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dv_roc_auc(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    out: *mut f64,
) -> DvStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = diffvad::eval::roc_auc(slice_arg(scores, n, "scores")?, slice_arg(labels, n, "labels")?)?;
        Ok(())
    })
}

/// Writes the `steps + 1` schedule levels (ending with 0) to `out`.
///
/// # Safety
/// `out` must hold `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn dv_karras_schedule(
    steps: usize,
    sigma_min: f64,
    sigma_max: f64,
    rho: f64,
    out: *mut f64,
    out_len: usize,
) -> DvStatus {
    guard(|| {
        let s = karras_schedule(&ScheduleConfig::new(steps, sigma_min, sigma_max, rho)?)?;
        if out_len != s.sigmas().len() {
            return Err(Fail(
                DvStatus::InvalidArgument,
                format!("schedule has {} levels, buffer holds {out_len}", s.sigmas().len()),
            ));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        std::slice::from_raw_parts_mut(out, out_len).copy_from_slice(s.sigmas());
        Ok(())
    })
}

/// # Safety
/// `sigma_min` and `sigma_max` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dv_noise_bounds(
    p_mean: f64,
    p_std: f64,
    sigma_min: *mut f64,
    sigma_max: *mut f64,
) -> DvStatus {
    guard(|| {
        let (lo_out, hi_out) = (out_arg(sigma_min, "sigma_min")?, out_arg(sigma_max, "sigma_max")?);
        let (lo, hi) = noise_bounds(&TrainNoiseConfig::new(p_mean, p_std)?);
        (*lo_out, *hi_out) = (lo, hi);
        Ok(())
    })
}

/// # Safety
/// `losses` must hold `n` doubles; outputs must be valid.
#[no_mangle]
pub unsafe extern "C" fn dv_batch_threshold(
    losses: *const f64,
    n: usize,
    k: f64,
    mu: *mut f64,
    sigma: *mut f64,
    l_th: *mut f64,
) -> DvStatus {
    guard(|| {
        let (m, s, t) = batch_threshold(slice_arg(losses, n, "losses")?, k)?;
        *out_arg(mu, "mu")? = m;
        *out_arg(sigma, "sigma")? = s;
        *out_arg(l_th, "l_th")? = t;
        Ok(())
    })
}
