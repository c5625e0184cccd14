//! C ABI over the `avsnn` engine.
//!
//! Every fallible call returns an [`AvsnnStatus`]; on failure the message is
//! available from [`avsnn_last_error`] on the same thread. Models are opaque
//! handles released with [`avsnn_model_free`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use avsnn::analysis::energy_from_counts;
use avsnn::checkpoint::Checkpoint;
use avsnn::frontend::audio::{fbank, AudioWave, MEL_BINS};
use avsnn::model::{predict, stack_time_major};
use avsnn::{AvModel, Error, ModelInput, NetworkConfig, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AvsnnStatus {
    Ok = 0,
    Shape = 1,
    NotBinary = 2,
    StaleTape = 3,
    State = 4,
    Contract = 5,
    Alignment = 6,
    Config = 7,
    EmptyInput = 8,
    DegenerateInput = 9,
    Numeric = 10,
    Checkpoint = 11,
    Format = 12,
    Io = 13,
    Json = 14,
    Wav = 15,
    NullPointer = 16,
    InvalidArgument = 17,
    Panic = 18,
}

impl From<&Error> for AvsnnStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Shape { .. } => Self::Shape,
            Error::NotBinary { .. } => Self::NotBinary,
            Error::StaleTape(_) => Self::StaleTape,
            Error::State(_) => Self::State,
            Error::Contract(_) => Self::Contract,
            Error::Alignment { .. } => Self::Alignment,
            Error::Config(_) => Self::Config,
            Error::EmptyInput(_) => Self::EmptyInput,
            Error::Degenerate(_) => Self::DegenerateInput,
            Error::Numeric(_) => Self::Numeric,
            Error::Checkpoint(_) => Self::Checkpoint,
            Error::Format(_) => Self::Format,
            Error::Io(_) => Self::Io,
            Error::Json(_) => Self::Json,
            Error::Wav(_) => Self::Wav,
        }
    }
}

/// Opaque model handle.
pub struct AvsnnModel {
    inner: AvModel,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

enum Fail {
    Engine(Error),
    Null(&'static str),
    Arg(String),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Engine(e)
    }
}

/// Runs `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> AvsnnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            AvsnnStatus::Ok
        }
        Ok(Err(Fail::Engine(e))) => {
            set_error(&e.to_string());
            AvsnnStatus::from(&e)
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(&format!("{what} is null"));
            AvsnnStatus::NullPointer
        }
        Ok(Err(Fail::Arg(msg))) => {
            set_error(&msg);
            AvsnnStatus::InvalidArgument
        }
        Err(_) => {
            set_error("internal panic");
            AvsnnStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &'static str) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail::Arg(format!("{what} is not UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn model_ref<'a>(m: *const AvsnnModel) -> Result<&'a AvsnnModel, Fail> {
    m.as_ref().ok_or(Fail::Null("model"))
}

unsafe fn model_mut<'a>(m: *mut AvsnnModel) -> Result<&'a mut AvsnnModel, Fail> {
    m.as_mut().ok_or(Fail::Null("model"))
}

unsafe fn slice<'a>(p: *const f64, n: usize, what: &'static str) -> Result<&'a [f64], Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_mut<'a>(p: *mut f64, n: usize, what: &'static str) -> Result<&'a mut [f64], Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, n))
}

/// Message of the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn avsnn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn avsnn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Builds a randomly initialized model. `config_json` is a network
/// configuration object, or null for the defaults.
///
/// # Safety
/// `config_json` must be null or a valid NUL-terminated string; `out` must be
/// a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn avsnn_model_new(config_json: *const c_char, seed: u64, out: *mut *mut AvsnnModel) -> AvsnnStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let cfg = if config_json.is_null() {
            NetworkConfig::default()
        } else {
            let text = CStr::from_ptr(config_json)
                .to_str()
                .map_err(|_| Fail::Arg("config is not UTF-8".into()))?;
            serde_json::from_str(text).map_err(Error::from)?
        };
        let inner = AvModel::new(cfg, seed)?;
        *out = Box::into_raw(Box::new(AvsnnModel { inner }));
        Ok(())
    })
}

/// Loads a model checkpoint.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn avsnn_model_load(path: *const c_char, out: *mut *mut AvsnnModel) -> AvsnnStatus {
    guard(|| {
        if out.is_null() {
            return Err(Fail::Null("out"));
        }
        let inner = Checkpoint::load(&path_arg(path, "path")?)?.to_model()?;
        *out = Box::into_raw(Box::new(AvsnnModel { inner }));
        Ok(())
    })
}

/// Writes the model's parameters as a checkpoint.
///
/// # Safety
/// `model` must come from this library and `path` be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn avsnn_model_save(model: *const AvsnnModel, path: *const c_char) -> AvsnnStatus {
    guard(|| {
        let m = model_ref(model)?;
        Checkpoint::from_model(&m.inner).save(&path_arg(path, "path")?)?;
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn avsnn_model_free(model: *mut AvsnnModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of timesteps `T`, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn avsnn_model_timesteps(model: *const AvsnnModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.cfg.timesteps)
}

/// Number of classes `C`, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn avsnn_model_num_classes(model: *const AvsnnModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.cfg.num_classes)
}

/// Scalar parameter count, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn avsnn_model_num_parameters(model: *const AvsnnModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.num_parameters())
}

/// Eval-mode forward on one sample.
///
/// `voxels` is `[steps][2][H][W]` of 0/1 values and `audio` is
/// `[steps][F]`; either may be null when the model does not use it.
/// `logits` receives `[steps][C]` and must hold `logits_len` values.
///
/// # Safety
/// Non-null buffers must hold the stated number of values.
#[no_mangle]
pub unsafe extern "C" fn avsnn_model_infer(
    model: *mut AvsnnModel,
    voxels: *const f64,
    audio: *const f64,
    steps: usize,
    logits: *mut f64,
    logits_len: usize,
) -> AvsnnStatus {
    guard(|| {
        let m = model_mut(model)?;
        let cfg = m.inner.cfg.clone();
        if steps == 0 {
            return Err(Fail::Arg("steps must be positive".into()));
        }
        let vis = if voxels.is_null() {
            None
        } else {
            let per = 2 * cfg.visual_height * cfg.visual_width;
            let v = slice(voxels, steps * per, "voxels")?;
            let t = Tensor::new(vec![steps, 2, cfg.visual_height, cfg.visual_width], v.to_vec())?;
            Some(stack_time_major(vec![t])?)
        };
        let aud = if audio.is_null() {
            None
        } else {
            let a = slice(audio, steps * cfg.audio_features, "audio")?;
            let t = Tensor::new(vec![steps, cfg.audio_features], a.to_vec())?;
            Some(stack_time_major(vec![t])?)
        };
        let need = steps * cfg.num_classes;
        if logits_len < need {
            return Err(Fail::Arg(format!("logits buffer holds {logits_len} values, {need} needed")));
        }
        let out = m.inner.infer(&ModelInput { voxels: vis, audio: aud })?;
        slice_mut(logits, need, "logits")?.copy_from_slice(out.data());
        Ok(())
    })
}

/// Class with the largest logit summed over the first `upto_t` steps
/// (all steps when `upto_t` is 0). Ties go to the lower index.
///
/// # Safety
/// `logits` must hold `steps * classes` values and `out_class` be valid.
#[no_mangle]
pub unsafe extern "C" fn avsnn_predict(
    logits: *const f64,
    steps: usize,
    classes: usize,
    upto_t: usize,
    out_class: *mut usize,
) -> AvsnnStatus {
    guard(|| {
        if out_class.is_null() {
            return Err(Fail::Null("out_class"));
        }
        let o = Tensor::new(vec![steps, classes], slice(logits, steps * classes, "logits")?.to_vec())?;
        *out_class = predict(&o, (upto_t > 0).then_some(upto_t))?;
        Ok(())
    })
}

/// Energy in millijoules for the given multiplication and addition counts.
#[no_mangle]
pub extern "C" fn avsnn_energy_from_counts(mult: f64, add: f64) -> f64 {
    energy_from_counts(mult, add)
}

/// Number of mel bins per feature frame.
#[no_mangle]
pub extern "C" fn avsnn_mel_bins() -> usize {
    MEL_BINS
}

/// Log mel filterbank features standardized to `steps` frames; `out`
/// receives `[steps][avsnn_mel_bins()]` values.
///
/// # Safety
/// `samples` must hold `n` values and `out` `out_len` values.
#[no_mangle]
pub unsafe extern "C" fn avsnn_fbank(
    samples: *const f64,
    n: usize,
    sample_rate: u32,
    steps: usize,
    out: *mut f64,
    out_len: usize,
) -> AvsnnStatus {
    guard(|| {
        let need = steps * MEL_BINS;
        if out_len < need {
            return Err(Fail::Arg(format!("output buffer holds {out_len} values, {need} needed")));
        }
        let w = AudioWave::new(slice(samples, n, "samples")?.to_vec(), sample_rate)?;
        let f = fbank(&w, steps)?;
        slice_mut(out, need, "out")?.copy_from_slice(f.frames.data());
        Ok(())
    })
}
