//! C ABI for whale-kit.
//!
//! Every fallible function returns a [`WkStatus`]; on failure the message is
//! available from [`wk_last_error`] on the same thread. Strings returned
//! through out-parameters are owned by the caller and released with
//! [`wk_string_free`]. Models are opaque handles released with
//! [`wk_model_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use whale_kit::ctc::ctc_loss_value;
use whale_kit::eval::{edit_distance, normalize_text, units};
use whale_kit::model::AsrModel;
use whale_kit::search::{BeamConfig, DEFAULT_LAMBDA_CTC};
use whale_kit::tensor::{Precision, Tensor};
use whale_kit::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WkStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    /// Bad shapes, unknown languages, out-of-range options.
    InvalidArgument = 3,
    /// The labels need more frames than the input has.
    ImpossibleAlignment = 4,
    /// Unreadable or malformed files.
    Io = 5,
    Numeric = 6,
    /// A Rust panic was caught at the boundary.
    Internal = 7,
}

/// A loaded recognition model.
pub struct WkModel {
    model: AsrModel,
}

/// Beam search settings for [`wk_model_decode`].
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct WkDecodeOptions {
    pub beam_size: usize,
    /// Weight of the CTC prefix score; the decoder gets `1 - lambda_ctc`.
    pub lambda_ctc: f64,
    /// Maximum number of emitted tokens.
    pub max_len: usize,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WkEditCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    /// Number of reference units (words, or characters for ja/zh/yue).
    pub reference_units: usize,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

type Failure = (WkStatus, String);

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn classify(e: Error) -> Failure {
    let status = match &e {
        Error::ImpossibleAlignment { .. } => WkStatus::ImpossibleAlignment,
        Error::Io { .. } | Error::Json(_) | Error::MissingParam(_) => WkStatus::Io,
        Error::Numeric { .. } | Error::UnregisteredPrimitive(_) => WkStatus::Numeric,
        _ => WkStatus::InvalidArgument,
    };
    (status, e.to_string())
}

fn run(f: impl FnOnce() -> Result<(), Failure>) -> WkStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    let (status, msg) = match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => return WkStatus::Ok,
        Ok(Err(fail)) => fail,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            (WkStatus::Internal, format!("internal error: {msg}"))
        }
    };
    set_error(msg);
    status
}

fn null(what: &str) -> Failure {
    (WkStatus::NullPointer, format!("{what} is null"))
}

unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (WkStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn read_opt_str<'a>(p: *const c_char, what: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        read_str(p, what).map(Some)
    }
}

unsafe fn write_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    let c = CString::new(s).map_err(|_| (WkStatus::Internal, "string contains NUL".to_string()))?;
    *out = c.into_raw();
    Ok(())
}

/// Message of the last failed call on this thread, or NULL. The pointer
/// stays valid until the next whale-kit call on the same thread.
#[no_mangle]
pub extern "C" fn wk_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn wk_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from a whale-kit out-parameter and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn wk_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Default decoding options: beam 4, CTC weight 0.3, at most 48 tokens.
#[no_mangle]
pub extern "C" fn wk_decode_options_default() -> WkDecodeOptions {
    let d = BeamConfig::default();
    WkDecodeOptions {
        beam_size: d.beam_size,
        lambda_ctc: DEFAULT_LAMBDA_CTC,
        max_len: d.max_len,
    }
}

/// Loads a model directory written by `whale-kit train` or `pretrain`.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn wk_model_load(dir: *const c_char, out: *mut *mut WkModel) -> WkStatus {
    run(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let dir = read_str(dir, "dir")?;
        let model = AsrModel::load(Path::new(dir)).map_err(classify)?;
        *out = Box::into_raw(Box::new(WkModel { model }));
        Ok(())
    })
}

/// Releases a model. NULL is ignored.
///
/// # Safety
/// `model` must come from [`wk_model_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn wk_model_free(model: *mut WkModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Feature dimension the model expects per frame.
///
/// # Safety
/// `model` must be a live handle or NULL (which yields 0).
#[no_mangle]
pub unsafe extern "C" fn wk_model_feature_dim(model: *const WkModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.cfg.ssl.input_dim)
}

/// Recognizes one utterance of `frames × dim` row-major features.
/// `language` forces the language token and `adapt_language` applies that
/// language's mask at the encoder taps; either may be NULL. The transcript
/// is written to `out_text`.
///
/// # Safety
/// `features` must point to `frames * dim` floats; string arguments must
/// be NUL-terminated or NULL; `out_text` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wk_model_decode(
    model: *const WkModel,
    features: *const f32,
    frames: usize,
    dim: usize,
    options: *const WkDecodeOptions,
    language: *const c_char,
    adapt_language: *const c_char,
    out_text: *mut *mut c_char,
) -> WkStatus {
    run(|| {
        if out_text.is_null() {
            return Err(null("out_text"));
        }
        *out_text = ptr::null_mut();
        let m = &model.as_ref().ok_or_else(|| null("model"))?.model;
        if features.is_null() {
            return Err(null("features"));
        }
        let opts = options.as_ref().copied().unwrap_or_else(|| wk_decode_options_default());
        let language = read_opt_str(language, "language")?;
        let adapt = read_opt_str(adapt_language, "adapt_language")?;
        if dim != m.cfg.ssl.input_dim {
            return Err((
                WkStatus::InvalidArgument,
                format!("model expects {} features per frame, got {dim}", m.cfg.ssl.input_dim),
            ));
        }
        let n = frames
            .checked_mul(dim)
            .ok_or_else(|| (WkStatus::InvalidArgument, "frames * dim overflows".to_string()))?;
        let data: Vec<f64> = std::slice::from_raw_parts(features, n)
            .iter()
            .map(|&x| x as f64)
            .collect();
        let x = Tensor::from_matrix(frames, dim, data, Precision::F32)
            .map_err(classify)?
            .to_precision(m.precision());
        let beam = BeamConfig {
            beam_size: opts.beam_size,
            lambda_ctc: opts.lambda_ctc,
            max_len: opts.max_len,
            ..BeamConfig::default()
        };
        beam.validate().map_err(classify)?;
        let r = m.recognize(&x, &beam, language, adapt).map_err(classify)?;
        write_string(out_text, r.text)
    })
}

/// Negative log-likelihood of `labels` under `t × v` row-major CTC
/// log-posteriors (blank is id 0).
///
/// # Safety
/// `log_post` must point to `t * v` doubles, `labels` to `num_labels` ids.
#[no_mangle]
pub unsafe extern "C" fn wk_ctc_loss(
    log_post: *const f64,
    t: usize,
    v: usize,
    labels: *const usize,
    num_labels: usize,
    out_loss: *mut f64,
) -> WkStatus {
    run(|| {
        if log_post.is_null() || out_loss.is_null() || (labels.is_null() && num_labels > 0) {
            return Err(null("argument"));
        }
        let n = t
            .checked_mul(v)
            .ok_or_else(|| (WkStatus::InvalidArgument, "t * v overflows".to_string()))?;
        let lp = std::slice::from_raw_parts(log_post, n);
        let labels = if num_labels == 0 {
            &[][..]
        } else {
            std::slice::from_raw_parts(labels, num_labels)
        };
        *out_loss = ctc_loss_value(lp, t, v, labels).map_err(classify)?;
        Ok(())
    })
}

/// Normalizes both texts for `language` and counts minimal edits over
/// words, or characters for ja/zh/yue.
///
/// # Safety
/// String arguments must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wk_edit_distance(
    reference: *const c_char,
    hypothesis: *const c_char,
    language: *const c_char,
    out: *mut WkEditCounts,
) -> WkStatus {
    run(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let lang = read_str(language, "language")?;
        let r = units(&normalize_text(read_str(reference, "reference")?, lang), lang);
        let h = units(&normalize_text(read_str(hypothesis, "hypothesis")?, lang), lang);
        let c = edit_distance(&r, &h);
        *out = WkEditCounts {
            substitutions: c.substitutions,
            deletions: c.deletions,
            insertions: c.insertions,
            reference_units: r.len(),
        };
        Ok(())
    })
}

/// Scoring normalization of `text` for `language`, written to `out_text`.
///
/// # Safety
/// String arguments must be NUL-terminated; `out_text` must be writable.
#[no_mangle]
pub unsafe extern "C" fn wk_normalize_text(
    text: *const c_char,
    language: *const c_char,
    out_text: *mut *mut c_char,
) -> WkStatus {
    run(|| {
        if out_text.is_null() {
            return Err(null("out_text"));
        }
        *out_text = ptr::null_mut();
        let s = normalize_text(read_str(text, "text")?, read_str(language, "language")?);
        write_string(out_text, s)
    })
}
