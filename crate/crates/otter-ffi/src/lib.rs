//! C ABI over the detection pipeline: dataset synthesis, training,
//! evaluation, and frame analysis.
//!
//! Conventions:
//! - Functions return an [`OtterStatus`]; anything but `Ok` leaves a
//!   message retrievable via [`otter_last_error`] (thread-local, valid
//!   until the next call on the same thread).
//! - `OtterModel` is an opaque handle; free it with [`otter_model_free`].
//! - Strings returned through out-parameters are NUL-terminated, owned by
//!   the caller, and must be released with [`otter_string_free`].

use std::cell::RefCell;
use std::collections::HashMap;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use otter_core::analysis::{analyze_frames, confidence_csv};
use otter_core::cli;
use otter_core::data::ingest::{ingest, read_classes, standardize_frames, STANDARD_FRAMES};
use otter_core::detector::checkpoint::{load_checkpoint, model_from_checkpoint};
use otter_core::detector::model::Model;
use otter_core::detector::train::evaluate_model;
use otter_core::detector::TrainConfig;
use otter_core::error::Error;
use otter_core::eval::MetricsTable;
use otter_core::serde_json;

/// Result codes mirroring the CLI exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OtterStatus {
    Ok = 0,
    /// Bad arguments or configuration.
    Usage = 1,
    /// Dataset, checkpoint, or filesystem problem.
    Data = 2,
    /// Non-finite numbers or a diverged computation.
    Numeric = 3,
    /// A NULL pointer where one is not allowed.
    NullArg = 4,
    /// An internal panic was caught at the boundary.
    Panic = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &Error) -> OtterStatus {
    match err.exit_code() {
        1 => OtterStatus::Usage,
        3 => OtterStatus::Numeric,
        _ => OtterStatus::Data,
    }
}

/// Message for the most recent failure on this thread. Never NULL; empty
/// when no error has occurred. Valid until the next FFI call on the thread.
#[no_mangle]
pub extern "C" fn otter_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version string (static storage, do not free).
#[no_mangle]
pub extern "C" fn otter_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Opaque trained-model handle.
pub struct OtterModel {
    model: Model<f32>,
}

unsafe fn cstr<'a>(ptr: *const c_char) -> Result<&'a str, OtterStatus> {
    if ptr.is_null() {
        set_error("unexpected NULL argument");
        return Err(OtterStatus::NullArg);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("argument is not valid UTF-8");
        OtterStatus::Usage
    })
}

unsafe fn opt_cstr<'a>(ptr: *const c_char) -> Result<Option<&'a str>, OtterStatus> {
    if ptr.is_null() {
        Ok(None)
    } else {
        cstr(ptr).map(Some)
    }
}

fn guard(body: impl FnOnce() -> OtterStatus) -> OtterStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("internal panic: {msg}"));
            OtterStatus::Panic
        }
    }
}

fn return_string(out: *mut *mut c_char, text: String) -> OtterStatus {
    let sanitized: String = text.chars().filter(|&c| c != '\0').collect();
    let c = CString::new(sanitized).unwrap_or_default();
    unsafe { *out = c.into_raw() };
    OtterStatus::Ok
}

/// Release a string returned by this library.
///
/// # Safety
/// `s` must have been returned by an `otter_*` function and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn otter_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Generate a synthetic moving-blob dataset under `out_dir`.
/// `config_path` may be NULL for defaults; see the CLI `synth` command for
/// the accepted keys.
///
/// # Safety
/// Pointer arguments must be NULL or valid NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn otter_synth(
    config_path: *const c_char,
    out_dir: *const c_char,
    seed: u64,
) -> OtterStatus {
    guard(|| {
        let out = match cstr(out_dir) {
            Ok(s) => s,
            Err(st) => return st,
        };
        let config = match opt_cstr(config_path) {
            Ok(c) => c,
            Err(st) => return st,
        };
        let mut flags: HashMap<String, String> = HashMap::new();
        flags.insert("out".into(), out.into());
        flags.insert("seed".into(), seed.to_string());
        if let Some(c) = config {
            flags.insert("config".into(), c.into());
        }
        match cli::cmd_synth(&flags) {
            Ok(()) => OtterStatus::Ok,
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Train a detector; equivalent to the CLI `train` command. Optional
/// arguments may be NULL.
///
/// # Safety
/// Pointer arguments must be NULL or valid NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn otter_train(
    data_dir: *const c_char,
    out_dir: *const c_char,
    variant: *const c_char,
    model_config: *const c_char,
    train_config: *const c_char,
    init_checkpoint: *const c_char,
    seed: u64,
) -> OtterStatus {
    guard(|| {
        let mut flags: HashMap<String, String> = HashMap::new();
        for (key, value) in [("data", data_dir), ("out", out_dir)] {
            match cstr(value) {
                Ok(s) => flags.insert(key.into(), s.into()),
                Err(st) => return st,
            };
        }
        for (key, value) in [
            ("variant", variant),
            ("model-config", model_config),
            ("config", train_config),
            ("init", init_checkpoint),
        ] {
            match opt_cstr(value) {
                Ok(Some(s)) => {
                    flags.insert(key.into(), s.into());
                }
                Ok(None) => {}
                Err(st) => return st,
            }
        }
        flags.insert("seed".into(), seed.to_string());
        match cli::cmd_train(&flags) {
            Ok(()) => OtterStatus::Ok,
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Load a checkpoint into an opaque model handle.
///
/// # Safety
/// `checkpoint_path` must be a valid string; `out` must point to writable
/// storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn otter_model_load(
    checkpoint_path: *const c_char,
    out: *mut *mut OtterModel,
) -> OtterStatus {
    guard(|| {
        if out.is_null() {
            set_error("out handle is NULL");
            return OtterStatus::NullArg;
        }
        let path = match cstr(checkpoint_path) {
            Ok(s) => s,
            Err(st) => return st,
        };
        match load_checkpoint(Path::new(path)).and_then(|c| model_from_checkpoint(&c)) {
            Ok(model) => {
                *out = Box::into_raw(Box::new(OtterModel { model }));
                OtterStatus::Ok
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Destroy a model handle (NULL is a no-op).
///
/// # Safety
/// `model` must be NULL or a handle from [`otter_model_load`], freed once.
#[no_mangle]
pub unsafe extern "C" fn otter_model_free(model: *mut OtterModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Variant name of a loaded model ("baseline", "temporal", "temporal_cbam").
///
/// # Safety
/// `model` must be a live handle; `out` receives an owned string.
#[no_mangle]
pub unsafe extern "C" fn otter_model_variant(
    model: *const OtterModel,
    out: *mut *mut c_char,
) -> OtterStatus {
    guard(|| {
        if model.is_null() || out.is_null() {
            set_error("NULL model or out pointer");
            return OtterStatus::NullArg;
        }
        let name = (*model).model.config.variant.name().to_string();
        return_string(out, name)
    })
}

/// Evaluate a loaded model on a dataset split and return the metric table
/// as CSV (columns: Class, Instances, P, R, mAP50, mAP50-95).
/// `split` is "val" or "test"; `split_seed` must match the training run
/// when no explicit split file was used.
///
/// # Safety
/// Pointer arguments must be valid; `csv_out` receives an owned string.
#[no_mangle]
pub unsafe extern "C" fn otter_eval_csv(
    model: *const OtterModel,
    data_dir: *const c_char,
    split: *const c_char,
    split_seed: u64,
    csv_out: *mut *mut c_char,
) -> OtterStatus {
    guard(|| {
        if model.is_null() || csv_out.is_null() {
            set_error("NULL model or out pointer");
            return OtterStatus::NullArg;
        }
        let data = match cstr(data_dir) {
            Ok(s) => s,
            Err(st) => return st,
        };
        let split_name = match cstr(split) {
            Ok(s) => s,
            Err(st) => return st,
        };
        let model = &(*model).model;
        let result = (|| -> otter_core::Result<String> {
            let root = Path::new(data);
            let classes = read_classes(root)?;
            if classes.len() != model.config.num_classes {
                return Err(Error::Data(format!(
                    "checkpoint expects {} classes, dataset lists {}",
                    model.config.num_classes,
                    classes.len()
                )));
            }
            let videos: Vec<_> = ingest(root)?
                .into_iter()
                .map(|v| standardize_frames(v, STANDARD_FRAMES))
                .collect();
            let ids: Vec<String> = videos.iter().map(|v| v.id.clone()).collect();
            let cfg = TrainConfig::default_for(model.config.variant);
            let split_set = otter_core::data::split_videos(&ids, cfg.split, split_seed)?;
            let subset = split_set.subset(split_name)?;
            let output = evaluate_model(model, &videos, subset, cfg.eval_stride)?;
            Ok(MetricsTable::from_summary(&output.summary, &classes).to_csv())
        })();
        match result {
            Ok(csv) => return_string(csv_out, csv),
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}

/// Frame-by-frame analysis over an inclusive frame range of one video.
/// Returns the records as pretty-printed JSON; `csv_out`, when non-NULL,
/// receives the confidence-per-frame series.
///
/// # Safety
/// Pointer arguments must be valid; out-strings are owned by the caller.
#[no_mangle]
pub unsafe extern "C" fn otter_analyze_json(
    model: *const OtterModel,
    data_dir: *const c_char,
    video_id: *const c_char,
    frame_lo: u32,
    frame_hi: u32,
    json_out: *mut *mut c_char,
    csv_out: *mut *mut c_char,
) -> OtterStatus {
    guard(|| {
        if model.is_null() || json_out.is_null() {
            set_error("NULL model or out pointer");
            return OtterStatus::NullArg;
        }
        let data = match cstr(data_dir) {
            Ok(s) => s,
            Err(st) => return st,
        };
        let video = match cstr(video_id) {
            Ok(s) => s,
            Err(st) => return st,
        };
        if frame_lo > frame_hi {
            set_error("empty frame range");
            return OtterStatus::Usage;
        }
        let model = &(*model).model;
        let result = (|| -> otter_core::Result<(String, String)> {
            let root = Path::new(data);
            let classes = read_classes(root)?;
            let videos: Vec<_> = ingest(root)?
                .into_iter()
                .map(|v| standardize_frames(v, STANDARD_FRAMES))
                .collect();
            let record = videos
                .iter()
                .find(|v| v.id == video)
                .ok_or_else(|| Error::Data(format!("no video '{video}'")))?;
            let records = analyze_frames(
                model,
                record,
                (frame_lo as usize, frame_hi as usize),
                &classes,
            )?;
            let json = serde_json::to_string_pretty(&records)
                .map_err(|e| Error::Data(format!("serialize: {e}")))?;
            Ok((json, confidence_csv(&records)))
        })();
        match result {
            Ok((json, csv)) => {
                if !csv_out.is_null() {
                    return_string(csv_out, csv);
                }
                return_string(json_out, json)
            }
            Err(e) => {
                set_error(&e.to_string());
                status_of(&e)
            }
        }
    })
}
