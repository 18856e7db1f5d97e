//! C ABI wrapper around the core library: opaque handles, integer status
//! codes and a thread-local last-error message.
//!
//! Conventions:
//! - Every fallible call returns `SfgStatus`; on failure the message is
//!   available from `sfg_last_error` until the next failing call on the
//!   same thread.
//! - `*_free` functions accept null and are the only way to release a
//!   handle. Handles are not thread-safe; use each handle from one thread.
//! - Strings are NUL-terminated UTF-8.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use sfg_core::config::ExperimentConfig;
use sfg_core::data::{self, DatasetKind, SynthDataset};
use sfg_core::tensor::Tensor;
use sfg_core::train::{self, RunOutput};
use sfg_core::{checkpoint, Error};

/// Status code returned by every fallible function.
#[repr(C)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum SfgStatus {
    /// The call succeeded.
    Ok = 0,
    /// A pointer, size or enum argument was invalid.
    InvalidArgument = 1,
    /// The operation itself failed (I/O, parse, numerical error, ...).
    RuntimeError = 2,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn fail(status: SfgStatus, msg: impl Into<String>) -> SfgStatus {
    let msg: String = msg.into();
    LAST_ERROR.with(|e| {
        *e.borrow_mut() = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    });
    status
}

fn runtime(e: Error) -> SfgStatus {
    fail(SfgStatus::RuntimeError, e.to_string())
}

/// Last error message of the current thread; empty string if none.
/// The pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn sfg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, SfgStatus> {
    if p.is_null() {
        return Err(fail(SfgStatus::InvalidArgument, "null path"));
    }
    match CStr::from_ptr(p).to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => Err(fail(SfgStatus::InvalidArgument, "path is not valid UTF-8")),
    }
}

fn guarded(f: impl FnOnce() -> SfgStatus) -> SfgStatus {
    catch_unwind(AssertUnwindSafe(f))
        .unwrap_or_else(|_| fail(SfgStatus::RuntimeError, "internal panic"))
}

// ------------------------------------------------------------- datasets

/// Opaque synthetic dataset handle.
pub struct SfgDataset {
    inner: SynthDataset,
}

/// Generate a synthetic dataset. `kind`: 0 = faces-like, 1 = scans-like.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn sfg_dataset_generate(
    kind: u32,
    n: usize,
    image_size: usize,
    seed: u64,
    out: *mut *mut SfgDataset,
) -> SfgStatus {
    guarded(|| {
        if out.is_null() {
            return fail(SfgStatus::InvalidArgument, "null output pointer");
        }
        let kind = match kind {
            0 => DatasetKind::Faces,
            1 => DatasetKind::Scans,
            k => return fail(SfgStatus::InvalidArgument, format!("unknown dataset kind {k}")),
        };
        match data::generate(kind, n, image_size, image_size, seed) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(SfgDataset { inner }));
                SfgStatus::Ok
            }
            Err(e) => runtime(e),
        }
    })
}

/// Load a dataset file written by `sfg_dataset_save` (or the CLI).
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn sfg_dataset_load(
    path: *const c_char,
    out: *mut *mut SfgDataset,
) -> SfgStatus {
    guarded(|| {
        if out.is_null() {
            return fail(SfgStatus::InvalidArgument, "null output pointer");
        }
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match data::load(&path) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(SfgDataset { inner }));
                SfgStatus::Ok
            }
            Err(e) => runtime(e),
        }
    })
}

/// Save a dataset to `path`.
///
/// # Safety
/// `ds` must be a live dataset handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sfg_dataset_save(ds: *const SfgDataset, path: *const c_char) -> SfgStatus {
    guarded(|| {
        let Some(ds) = ds.as_ref() else {
            return fail(SfgStatus::InvalidArgument, "null dataset handle");
        };
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match data::save(&ds.inner, &path) {
            Ok(()) => SfgStatus::Ok,
            Err(e) => runtime(e),
        }
    })
}

/// Number of items in the dataset; 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn sfg_dataset_len(ds: *const SfgDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.n)
}

/// Release a dataset handle (null is ignored).
///
/// # Safety
/// `ds` must be null or an owned handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn sfg_dataset_free(ds: *mut SfgDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

// -------------------------------------------------------------- configs

/// Opaque experiment configuration handle.
pub struct SfgConfig {
    inner: ExperimentConfig,
}

/// Parse a TOML configuration from a string.
///
/// # Safety
/// `toml` must be a NUL-terminated string; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn sfg_config_parse(
    toml: *const c_char,
    out: *mut *mut SfgConfig,
) -> SfgStatus {
    guarded(|| {
        if out.is_null() {
            return fail(SfgStatus::InvalidArgument, "null output pointer");
        }
        if toml.is_null() {
            return fail(SfgStatus::InvalidArgument, "null config text");
        }
        let text = match CStr::from_ptr(toml).to_str() {
            Ok(s) => s,
            Err(_) => return fail(SfgStatus::InvalidArgument, "config text is not valid UTF-8"),
        };
        match ExperimentConfig::from_toml_str(text) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(SfgConfig { inner }));
                SfgStatus::Ok
            }
            Err(e) => runtime(e),
        }
    })
}

/// Load a TOML configuration file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn sfg_config_load(
    path: *const c_char,
    out: *mut *mut SfgConfig,
) -> SfgStatus {
    guarded(|| {
        if out.is_null() {
            return fail(SfgStatus::InvalidArgument, "null output pointer");
        }
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match ExperimentConfig::load(&path) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(SfgConfig { inner }));
                SfgStatus::Ok
            }
            Err(e) => runtime(e),
        }
    })
}

/// Override the training seed of a parsed configuration.
///
/// # Safety
/// `cfg` must be a live configuration handle.
#[no_mangle]
pub unsafe extern "C" fn sfg_config_set_seed(cfg: *mut SfgConfig, seed: u64) -> SfgStatus {
    match cfg.as_mut() {
        Some(c) => {
            c.inner.train.seed = seed;
            SfgStatus::Ok
        }
        None => fail(SfgStatus::InvalidArgument, "null config handle"),
    }
}

/// Release a configuration handle (null is ignored).
///
/// # Safety
/// `cfg` must be null or an owned handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn sfg_config_free(cfg: *mut SfgConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

// ------------------------------------------------------------- training

/// Opaque handle for a completed training run (model + metrics).
pub struct SfgRun {
    inner: RunOutput,
}

/// Held-out evaluation metrics. Optional fields are only meaningful when
/// the matching `has_*` flag is nonzero.
#[repr(C)]
#[derive(Clone, Copy)]
pub struct SfgEvalReport {
    pub reg_mae: f64,
    pub reg_psnr: f64,
    pub cls_accuracy: f64,
    pub has_cls_accuracy: u8,
    pub seg_dice: f64,
    pub has_seg_dice: u8,
    pub reg2_mae: f64,
    pub has_reg2_mae: u8,
}

/// Train a model as described by the configuration and return the run.
///
/// # Safety
/// `cfg` must be a live configuration handle; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn sfg_train(cfg: *const SfgConfig, out: *mut *mut SfgRun) -> SfgStatus {
    guarded(|| {
        if out.is_null() {
            return fail(SfgStatus::InvalidArgument, "null output pointer");
        }
        let Some(cfg) = cfg.as_ref() else {
            return fail(SfgStatus::InvalidArgument, "null config handle");
        };
        match train::run(&cfg.inner.train) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(SfgRun { inner }));
                SfgStatus::Ok
            }
            Err(e) => runtime(e),
        }
    })
}

/// Copy the run's held-out evaluation metrics into `report`.
///
/// # Safety
/// `run` must be a live run handle; `report` a valid report slot.
#[no_mangle]
pub unsafe extern "C" fn sfg_run_eval(run: *const SfgRun, report: *mut SfgEvalReport) -> SfgStatus {
    guarded(|| {
        let Some(run) = run.as_ref() else {
            return fail(SfgStatus::InvalidArgument, "null run handle");
        };
        if report.is_null() {
            return fail(SfgStatus::InvalidArgument, "null report pointer");
        }
        let e = run.inner.eval;
        *report = SfgEvalReport {
            reg_mae: e.reg_mae,
            reg_psnr: e.reg_psnr,
            cls_accuracy: e.cls_accuracy.unwrap_or(0.0),
            has_cls_accuracy: e.cls_accuracy.is_some() as u8,
            seg_dice: e.seg_dice.unwrap_or(0.0),
            has_seg_dice: e.seg_dice.is_some() as u8,
            reg2_mae: e.reg2_mae.unwrap_or(0.0),
            has_reg2_mae: e.reg2_mae.is_some() as u8,
        };
        SfgStatus::Ok
    })
}

/// Final sampling temperature reached by the run; NaN for a null handle.
///
/// # Safety
/// `run` must be null or a live run handle.
#[no_mangle]
pub unsafe extern "C" fn sfg_run_final_tau(run: *const SfgRun) -> f64 {
    run.as_ref().map_or(f64::NAN, |r| r.inner.final_tau)
}

/// Number of grouped convolution layers in the trained model.
///
/// # Safety
/// `run` must be null or a live run handle.
#[no_mangle]
pub unsafe extern "C" fn sfg_run_num_layers(run: *const SfgRun) -> usize {
    run.as_ref().map_or(0, |r| r.inner.model.layers.len())
}

/// Number of kernels in the given layer (0 if out of range).
///
/// # Safety
/// `run` must be null or a live run handle.
#[no_mangle]
pub unsafe extern "C" fn sfg_run_layer_kernels(run: *const SfgRun, layer: usize) -> usize {
    run.as_ref()
        .and_then(|r| r.inner.model.layers.get(layer))
        .map_or(0, |l| l.num_kernels())
}

/// Copy the layer's grouping probabilities into `out` (row-major [K, 3]:
/// task-1, shared, task-2 per kernel). `len` must be exactly 3*K.
///
/// # Safety
/// `run` must be a live run handle; `out` must point to `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn sfg_run_grouping_probs(
    run: *const SfgRun,
    layer: usize,
    out: *mut f64,
    len: usize,
) -> SfgStatus {
    guarded(|| {
        let Some(run) = run.as_ref() else {
            return fail(SfgStatus::InvalidArgument, "null run handle");
        };
        let Some(l) = run.inner.model.layers.get(layer) else {
            return fail(SfgStatus::InvalidArgument, format!("layer {layer} out of range"));
        };
        if out.is_null() {
            return fail(SfgStatus::InvalidArgument, "null output buffer");
        }
        let rows = match l.grouping.prob_rows() {
            Ok(r) => r,
            Err(e) => return fail(SfgStatus::RuntimeError, e.to_string()),
        };
        if len != rows.len() * 3 {
            return fail(
                SfgStatus::InvalidArgument,
                format!("buffer holds {len} values, layer needs {}", rows.len() * 3),
            );
        }
        let slice = std::slice::from_raw_parts_mut(out, len);
        for (k, row) in rows.iter().enumerate() {
            slice[3 * k..3 * k + 3].copy_from_slice(row);
        }
        SfgStatus::Ok
    })
}

/// Save the trained model's parameters as a checkpoint file.
///
/// # Safety
/// `run` must be a live run handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sfg_run_save_checkpoint(
    run: *const SfgRun,
    path: *const c_char,
) -> SfgStatus {
    guarded(|| {
        let Some(run) = run.as_ref() else {
            return fail(SfgStatus::InvalidArgument, "null run handle");
        };
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match checkpoint::save(&run.inner.model.params(), &path) {
            Ok(()) => SfgStatus::Ok,
            Err(e) => runtime(e),
        }
    })
}

/// Restore model parameters from a checkpoint file written for the same
/// architecture and baseline.
///
/// # Safety
/// `run` must be a live run handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sfg_run_restore_checkpoint(
    run: *mut SfgRun,
    path: *const c_char,
) -> SfgStatus {
    guarded(|| {
        let Some(run) = run.as_mut() else {
            return fail(SfgStatus::InvalidArgument, "null run handle");
        };
        let path = match path_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        let entries = match checkpoint::load(&path) {
            Ok(e) => e,
            Err(e) => return runtime(e),
        };
        match checkpoint::restore(&run.inner.model.params(), &entries) {
            Ok(()) => SfgStatus::Ok,
            Err(e) => runtime(e),
        }
    })
}

/// Monte-Carlo prediction on a batch of images.
///
/// `images` is row-major [batch, 1, size, size]. `out_reg` receives the
/// task-1 regression output (`reg_len` = batch for the faces architecture,
/// batch*size*size for the scans architecture). `out_cls` (optional: may
/// be null with `cls_len` 0) receives task-2 class indices of the same
/// per-item layout. The batch must have at least 2 items.
///
/// # Safety
/// `run` must be a live run handle; buffers must match the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn sfg_run_predict(
    run: *const SfgRun,
    images: *const f64,
    batch: usize,
    image_size: usize,
    passes: usize,
    seed: u64,
    out_reg: *mut f64,
    reg_len: usize,
    out_cls: *mut i32,
    cls_len: usize,
) -> SfgStatus {
    guarded(|| {
        use sfg_core::zoo::ArchKind;
        let Some(run) = run.as_ref() else {
            return fail(SfgStatus::InvalidArgument, "null run handle");
        };
        if images.is_null() || out_reg.is_null() {
            return fail(SfgStatus::InvalidArgument, "null image or output buffer");
        }
        if batch < 2 {
            return fail(
                SfgStatus::InvalidArgument,
                "batch must have at least 2 items (batch-statistics normalisation)",
            );
        }
        let n = batch * image_size * image_size;
        let data = std::slice::from_raw_parts(images, n).to_vec();
        let images = match Tensor::from_vec(data, &[batch, 1, image_size, image_size]) {
            Ok(t) => t,
            Err(e) => return fail(SfgStatus::InvalidArgument, e.to_string()),
        };
        let dense = matches!(run.inner.model.spec.arch, ArchKind::ToyHighRes);
        let per_item = if dense { image_size * image_size } else { 1 };
        if reg_len != batch * per_item {
            return fail(
                SfgStatus::InvalidArgument,
                format!("reg buffer holds {reg_len} values, expected {}", batch * per_item),
            );
        }
        let mut rng = <rand_chacha::ChaCha20Rng as rand::SeedableRng>::seed_from_u64(seed);
        let mc = match train::mc_infer(
            &run.inner.model,
            &images,
            run.inner.final_tau,
            passes.max(1),
            &mut rng,
        ) {
            Ok(m) => m,
            Err(e) => return runtime(e),
        };
        std::slice::from_raw_parts_mut(out_reg, reg_len).copy_from_slice(&mc.reg);
        if !out_cls.is_null() {
            if cls_len != mc.cls.len() {
                return fail(
                    SfgStatus::InvalidArgument,
                    format!("cls buffer holds {cls_len} values, expected {}", mc.cls.len()),
                );
            }
            let out = std::slice::from_raw_parts_mut(out_cls, cls_len);
            for (o, c) in out.iter_mut().zip(&mc.cls) {
                *o = *c as i32;
            }
        }
        SfgStatus::Ok
    })
}

/// Release a run handle (null is ignored).
///
/// # Safety
/// `run` must be null or an owned handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn sfg_run_free(run: *mut SfgRun) {
    if !run.is_null() {
        drop(Box::from_raw(run));
    }
}
