//! C ABI for the multiview embedding library.
//!
//! All functions return an error code (`VISPE_OK` on success); the message
//! for the most recent failure on the calling thread is available through
//! [`vispe_last_error`]. Handles are opaque and must be released with the
//! matching `_free` function. Passing a null handle where one is required
//! yields `VISPE_ERR_NULL`.
//!
//! The generated C declarations live in `include/vispe.h`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;

use vispe::dataio::{self, MultiviewDataset, SyntheticSpec};
use vispe::embedder;
use vispe::evalsuite;
use vispe::trainer::{self, Mode, Trainer};
use vispe::VispeError;

pub const VISPE_OK: i32 = 0;
pub const VISPE_ERR_NULL: i32 = 1;
pub const VISPE_ERR_USAGE: i32 = 2;
pub const VISPE_ERR_CONFIG: i32 = 3;
pub const VISPE_ERR_NUMERIC: i32 = 4;
pub const VISPE_ERR_IO: i32 = 5;

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let cleaned: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(cleaned).unwrap());
}

fn fail(err: VispeError) -> i32 {
    let code = err.exit_code();
    set_error(&err.to_string());
    code
}

fn null_arg(what: &str) -> i32 {
    set_error(&format!("null argument: {what}"));
    VISPE_ERR_NULL
}

/// Message for the most recent error on this thread. The pointer stays valid
/// until the next failing call on the same thread. Never null.
#[no_mangle]
pub extern "C" fn vispe_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

unsafe fn cstr<'a>(p: *const c_char) -> Option<&'a str> {
    if p.is_null() {
        return None;
    }
    CStr::from_ptr(p).to_str().ok()
}

pub struct VispeDataset(MultiviewDataset);
pub struct VispeTrainer(Trainer);

// ---- dataset ----

/// Generate a synthetic dataset. `spec_json` is a JSON object matching the
/// synthetic spec fields; pass null for the defaults.
///
/// # Safety
/// `spec_json` must be null or a valid NUL-terminated UTF-8 string, and
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vispe_dataset_generate(
    spec_json: *const c_char,
    out: *mut *mut VispeDataset,
) -> i32 {
    if out.is_null() {
        return null_arg("out");
    }
    let spec = if spec_json.is_null() {
        SyntheticSpec::default()
    } else {
        let text = match cstr(spec_json) {
            Some(t) => t,
            None => return null_arg("spec_json (invalid UTF-8)"),
        };
        match serde_json::from_str(text) {
            Ok(s) => s,
            Err(e) => return fail(VispeError::Config(format!("bad spec JSON: {e}"))),
        }
    };
    match dataio::generate(&spec) {
        Ok(ds) => {
            *out = Box::into_raw(Box::new(VispeDataset(ds)));
            VISPE_OK
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// `dir` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vispe_dataset_load(dir: *const c_char, out: *mut *mut VispeDataset) -> i32 {
    if out.is_null() {
        return null_arg("out");
    }
    let dir = match cstr(dir) {
        Some(d) => d,
        None => return null_arg("dir"),
    };
    match dataio::load(Path::new(dir)) {
        Ok(ds) => {
            *out = Box::into_raw(Box::new(VispeDataset(ds)));
            VISPE_OK
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// `ds` must be a live dataset handle and `dir` a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn vispe_dataset_save(ds: *const VispeDataset, dir: *const c_char) -> i32 {
    let ds = match ds.as_ref() {
        Some(d) => d,
        None => return null_arg("ds"),
    };
    let dir = match cstr(dir) {
        Some(d) => d,
        None => return null_arg("dir"),
    };
    match dataio::save(&ds.0, Path::new(dir)) {
        Ok(()) => VISPE_OK,
        Err(e) => fail(e),
    }
}

/// # Safety
/// `ds` must be a live dataset handle (or null, giving 0).
#[no_mangle]
pub unsafe extern "C" fn vispe_dataset_n_objects(ds: *const VispeDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.objects.len())
}

/// # Safety
/// `ds` must be a live dataset handle (or null, giving 0).
#[no_mangle]
pub unsafe extern "C" fn vispe_dataset_total_views(ds: *const VispeDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.total_views())
}

/// # Safety
/// `ds` must be a live dataset handle (or null, giving 0).
#[no_mangle]
pub unsafe extern "C" fn vispe_dataset_obs_dim(ds: *const VispeDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.0.obs_dim)
}

/// # Safety
/// `ds` must be a handle from this library, not yet freed, or null.
#[no_mangle]
pub unsafe extern "C" fn vispe_dataset_free(ds: *mut VispeDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

// ---- trainer ----

/// Create a trainer. `mode` is one of "pe", "mvspe", "vispe", "instance",
/// "supervised", "triplet". `config_text` uses `key = value` lines and may
/// be null for the mode's defaults.
///
/// # Safety
/// `ds` must be a live dataset handle, `mode` a valid NUL-terminated string,
/// `config_text` null or a valid NUL-terminated string, `out` a valid
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn vispe_trainer_new(
    ds: *const VispeDataset,
    mode: *const c_char,
    config_text: *const c_char,
    out: *mut *mut VispeTrainer,
) -> i32 {
    if out.is_null() {
        return null_arg("out");
    }
    let ds = match ds.as_ref() {
        Some(d) => d,
        None => return null_arg("ds"),
    };
    let mode: Mode = match cstr(mode).map(|s| s.parse()) {
        Some(Ok(m)) => m,
        Some(Err(e)) => return fail(e),
        None => return null_arg("mode"),
    };
    let overrides = if config_text.is_null() {
        Default::default()
    } else {
        let text = match cstr(config_text) {
            Some(t) => t,
            None => return null_arg("config_text (invalid UTF-8)"),
        };
        match trainer::parse_config_text(text) {
            Ok(o) => o,
            Err(e) => return fail(e),
        }
    };
    let config = match trainer::build_config(mode, &overrides) {
        Ok(c) => c,
        Err(e) => return fail(e),
    };
    match Trainer::new(config, &ds.0) {
        Ok(t) => {
            *out = Box::into_raw(Box::new(VispeTrainer(t)));
            VISPE_OK
        }
        Err(e) => fail(e),
    }
}

/// Run `n` additional epochs (regardless of the configured epoch count).
///
/// # Safety
/// `t` and `ds` must be live handles; `ds` must be the dataset the trainer
/// was created against.
#[no_mangle]
pub unsafe extern "C" fn vispe_trainer_run_epochs(
    t: *mut VispeTrainer,
    ds: *const VispeDataset,
    n: usize,
) -> i32 {
    let t = match t.as_mut() {
        Some(t) => t,
        None => return null_arg("t"),
    };
    let ds = match ds.as_ref() {
        Some(d) => d,
        None => return null_arg("ds"),
    };
    for _ in 0..n {
        if let Err(e) = t.0.run_epoch(&ds.0, None) {
            return fail(e);
        }
    }
    VISPE_OK
}

/// Epochs completed so far (0 for a null handle).
///
/// # Safety
/// `t` must be a live trainer handle or null.
#[no_mangle]
pub unsafe extern "C" fn vispe_trainer_epoch(t: *const VispeTrainer) -> usize {
    t.as_ref().map_or(0, |t| t.0.epoch)
}

/// Mean total loss of the most recent epoch.
///
/// # Safety
/// `t` must be a live trainer handle, `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vispe_trainer_last_loss(t: *const VispeTrainer, out: *mut f64) -> i32 {
    let t = match t.as_ref() {
        Some(t) => t,
        None => return null_arg("t"),
    };
    if out.is_null() {
        return null_arg("out");
    }
    match t.0.history.last() {
        Some(s) => {
            *out = s.mean_total_loss;
            VISPE_OK
        }
        None => fail(VispeError::Usage("no epochs have run yet".into())),
    }
}

/// Embed one observation. `x` has `x_len` components (must equal the
/// observation dimension); `out` receives `out_len` components (must equal
/// the embedding dimension).
///
/// # Safety
/// `t` must be a live trainer handle; `x` and `out` must point to arrays of
/// the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn vispe_trainer_embed(
    t: *const VispeTrainer,
    x: *const f64,
    x_len: usize,
    out: *mut f64,
    out_len: usize,
) -> i32 {
    let t = match t.as_ref() {
        Some(t) => t,
        None => return null_arg("t"),
    };
    if x.is_null() {
        return null_arg("x");
    }
    if out.is_null() {
        return null_arg("out");
    }
    if out_len != t.0.params.arch.embed_dim {
        return fail(VispeError::Usage(format!(
            "out_len = {out_len}, embedding dimension is {}",
            t.0.params.arch.embed_dim
        )));
    }
    let x = std::slice::from_raw_parts(x, x_len);
    match embedder::embed(&t.0.params, x) {
        Ok(e) => {
            std::slice::from_raw_parts_mut(out, out_len).copy_from_slice(&e.v);
            VISPE_OK
        }
        Err(e) => fail(e),
    }
}

/// KNN accuracy on the unseen-class split of `ds`.
///
/// # Safety
/// `t` and `ds` must be live handles, `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vispe_trainer_eval_unseen_knn(
    t: *const VispeTrainer,
    ds: *const VispeDataset,
    out: *mut f64,
) -> i32 {
    let t = match t.as_ref() {
        Some(t) => t,
        None => return null_arg("t"),
    };
    let ds = match ds.as_ref() {
        Some(d) => d,
        None => return null_arg("ds"),
    };
    if out.is_null() {
        return null_arg("out");
    }
    match evalsuite::unseen_knn_accuracy(&t.0.params, &ds.0) {
        Ok(acc) => {
            *out = acc;
            VISPE_OK
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// `t` must be a live trainer handle, `dir` a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn vispe_trainer_checkpoint(t: *const VispeTrainer, dir: *const c_char) -> i32 {
    let t = match t.as_ref() {
        Some(t) => t,
        None => return null_arg("t"),
    };
    let dir = match cstr(dir) {
        Some(d) => d,
        None => return null_arg("dir"),
    };
    match t.0.checkpoint(Path::new(dir)) {
        Ok(()) => VISPE_OK,
        Err(e) => fail(e),
    }
}

/// # Safety
/// `dir` must be a valid NUL-terminated string, `ds` a live dataset handle,
/// `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vispe_trainer_resume(
    dir: *const c_char,
    ds: *const VispeDataset,
    out: *mut *mut VispeTrainer,
) -> i32 {
    if out.is_null() {
        return null_arg("out");
    }
    let ds = match ds.as_ref() {
        Some(d) => d,
        None => return null_arg("ds"),
    };
    let dir = match cstr(dir) {
        Some(d) => d,
        None => return null_arg("dir"),
    };
    match Trainer::resume(Path::new(dir), &ds.0) {
        Ok(t) => {
            *out = Box::into_raw(Box::new(VispeTrainer(t)));
            VISPE_OK
        }
        Err(e) => fail(e),
    }
}

/// # Safety
/// `t` must be a handle from this library, not yet freed, or null.
#[no_mangle]
pub unsafe extern "C" fn vispe_trainer_free(t: *mut VispeTrainer) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}
