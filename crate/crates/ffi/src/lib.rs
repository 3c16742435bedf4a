//! C ABI over the domain-balancing library.
//!
//! Every fallible function returns a [`DbStatus`]; on failure a message is
//! available from [`db_last_error_message`] on the same thread. Objects are
//! opaque handles created by `*_generate`, `*_load` or `*_init` and released
//! with the matching `*_free`. Matrices are dense, row-major `double` arrays.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use domain_balancing::dfi::{build_table, DfiConfig};
use domain_balancing::eval::{verification_accuracy, Embedder};
use domain_balancing::experiment::{build_dataset, init_state, ExperimentConfig};
use domain_balancing::losses::{classification_forward, FeatureBatch, LossConfig, LossKind};
use domain_balancing::model::{OptimConfig, TrainState};
use domain_balancing::synth::SyntheticDataset;
use domain_balancing::{Error, Matrix};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DbStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidConfig = 3,
    Io = 4,
    Format = 5,
    DimMismatch = 6,
    Numerical = 7,
    Panic = 8,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DbLossKind {
    Softmax = 0,
    Cosface = 1,
    Dbm = 2,
}

/// Opaque synthetic dataset.
pub struct DbDataset {
    inner: SyntheticDataset,
}

/// Opaque model: training state plus the optimizer settings used by
/// [`db_model_fit`].
pub struct DbModel {
    state: TrainState,
    optim: OptimConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> DbStatus {
    match e {
        Error::Io(_) => DbStatus::Io,
        Error::Format(_) | Error::VersionMismatch { .. } => DbStatus::Format,
        Error::InvalidConfig(_) | Error::KTooLarge { .. } => DbStatus::InvalidConfig,
        Error::DimMismatch { .. } | Error::LengthMismatch { .. } => DbStatus::DimMismatch,
        _ if e.exit_code() == 3 => DbStatus::Numerical,
        _ => DbStatus::InvalidArgument,
    }
}

struct Fail(DbStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(DbStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> DbStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => DbStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            DbStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(DbStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn out_slice<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Fail> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn parse_config(json: &str) -> Result<ExperimentConfig, Fail> {
    serde_json::from_str(json).map_err(|e| Fail(DbStatus::InvalidConfig, format!("config: {e}")))
}

fn matrix(data: &[f64], rows: usize, cols: usize) -> Result<Matrix, Fail> {
    Ok(Matrix::new(rows, cols, data.to_vec())?)
}

/// Message of the last failure on this thread, or null. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn db_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn db_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library (e.g. [`db_model_config_json`]).
///
/// # Safety
/// `s` must come from this library and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn db_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Generates the dataset described by an experiment configuration (JSON).
///
/// # Safety
/// `config_json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn db_dataset_generate(
    config_json: *const c_char,
    out: *mut *mut DbDataset,
) -> DbStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = parse_config(str_arg(config_json, "config_json")?)?;
        let inner = build_dataset(&cfg)?;
        *out = Box::into_raw(Box::new(DbDataset { inner }));
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn db_dataset_load(
    path: *const c_char,
    out: *mut *mut DbDataset,
) -> DbStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = SyntheticDataset::load(&PathBuf::from(str_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(DbDataset { inner }));
        Ok(())
    })
}

/// # Safety
/// `ds` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn db_dataset_save(ds: *const DbDataset, path: *const c_char) -> DbStatus {
    guard(|| {
        let ds = ds.as_ref().ok_or_else(|| null("dataset"))?;
        ds.inner.save(&PathBuf::from(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Writes the sample count, class count and input dimension; any output
/// pointer may be null.
///
/// # Safety
/// `ds` must be a live handle; non-null outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn db_dataset_shape(
    ds: *const DbDataset,
    samples: *mut usize,
    classes: *mut usize,
    dim: *mut usize,
) -> DbStatus {
    guard(|| {
        let ds = &ds.as_ref().ok_or_else(|| null("dataset"))?.inner;
        for (p, v) in [
            (samples, ds.len()),
            (classes, ds.num_classes()),
            (dim, ds.input_dim()),
        ] {
            if let Some(p) = p.as_mut() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// # Safety
/// `ds` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn db_dataset_free(ds: *mut DbDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Initializes a model for an experiment configuration (JSON).
///
/// # Safety
/// `config_json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn db_model_init(
    config_json: *const c_char,
    out: *mut *mut DbModel,
) -> DbStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = parse_config(str_arg(config_json, "config_json")?)?;
        let state = init_state(&cfg)?;
        *out = Box::into_raw(Box::new(DbModel {
            state,
            optim: cfg.optim,
        }));
        Ok(())
    })
}

/// Loads a checkpoint. Optimizer settings come from the configuration
/// stored in the checkpoint, or defaults when it carries none.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn db_model_load(path: *const c_char, out: *mut *mut DbModel) -> DbStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let state = TrainState::load_checkpoint(&PathBuf::from(str_arg(path, "path")?))?;
        let optim = serde_json::from_value::<ExperimentConfig>(state.provenance.clone())
            .map(|c| c.optim)
            .unwrap_or_default();
        *out = Box::into_raw(Box::new(DbModel { state, optim }));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn db_model_save(model: *const DbModel, path: *const c_char) -> DbStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        m.state
            .save_checkpoint(&PathBuf::from(str_arg(path, "path")?))?;
        Ok(())
    })
}

/// Trains on the dataset's training split for the remaining epochs.
///
/// # Safety
/// `model` and `ds` must be live handles.
#[no_mangle]
pub unsafe extern "C" fn db_model_fit(model: *mut DbModel, ds: *const DbDataset) -> DbStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| null("model"))?;
        let ds = ds.as_ref().ok_or_else(|| null("dataset"))?;
        m.state.fit(&ds.inner.training_set(), &m.optim, |_| {})?;
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn db_model_feature_dim(model: *const DbModel) -> usize {
    model.as_ref().map_or(0, |m| m.state.config.feature_dim)
}

/// Completed training epochs.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn db_model_epoch(model: *const DbModel) -> u64 {
    model.as_ref().map_or(0, |m| m.state.epoch)
}

/// Embeds `rows × cols` inputs in eval mode into `out` (`rows × feature_dim`).
///
/// # Safety
/// `inputs` must hold `rows * cols` values and `out` `out_len` writable values.
#[no_mangle]
pub unsafe extern "C" fn db_model_embed(
    model: *const DbModel,
    inputs: *const f64,
    rows: usize,
    cols: usize,
    out: *mut f64,
    out_len: usize,
) -> DbStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let x = matrix(slice_arg(inputs, rows * cols, "inputs")?, rows, cols)?;
        let need = rows * m.state.config.feature_dim;
        if out_len != need {
            return Err(Fail(
                DbStatus::DimMismatch,
                format!("out_len {out_len}, expected {need}"),
            ));
        }
        let emb = m.state.embed(&x)?;
        out_slice(out, out_len, "out")?.copy_from_slice(emb.data());
        Ok(())
    })
}

/// Resolved configuration stored with the model, as a JSON string to be
/// released with [`db_string_free`].
///
/// # Safety
/// `model` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn db_model_config_json(
    model: *const DbModel,
    out: *mut *mut c_char,
) -> DbStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let text = serde_json::to_string(&m.state.provenance)
            .map_err(|e| Fail(DbStatus::Format, e.to_string()))?;
        *out = CString::new(text).unwrap_or_default().into_raw();
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn db_model_free(model: *mut DbModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Compactness and frequency value per class for unit-norm prototypes
/// (`classes × dim`). Either output may be null.
///
/// # Safety
/// `prototypes` must hold `classes * dim` values; non-null outputs must hold
/// `classes` writable values.
#[no_mangle]
pub unsafe extern "C" fn db_dfi_compute(
    prototypes: *const f64,
    classes: usize,
    dim: usize,
    k_neighbors: usize,
    epsilon: f64,
    scale_s: f64,
    ic_out: *mut f64,
    beta_out: *mut f64,
) -> DbStatus {
    guard(|| {
        let w = matrix(
            slice_arg(prototypes, classes * dim, "prototypes")?,
            classes,
            dim,
        )?;
        let cfg = DfiConfig {
            k_neighbors,
            epsilon,
            scale_s,
            ..Default::default()
        };
        cfg.validate(classes)?;
        let table = build_table(&w, &cfg, 0)?;
        if !ic_out.is_null() {
            out_slice(ic_out, classes, "ic_out")?.copy_from_slice(&table.ic);
        }
        if !beta_out.is_null() {
            out_slice(beta_out, classes, "beta_out")?.copy_from_slice(&table.beta);
        }
        Ok(())
    })
}

/// Batch-mean classification loss on raw (unnormalized) features. `beta`
/// (`classes` values) is read only for [`DbLossKind::Dbm`]. Gradient
/// outputs may be null.
///
/// # Safety
/// Every non-null pointer must reference the documented number of values.
#[no_mangle]
pub unsafe extern "C" fn db_loss_forward(
    kind: DbLossKind,
    features: *const f64,
    batch: usize,
    dim: usize,
    labels: *const u32,
    prototypes: *const f64,
    classes: usize,
    beta: *const f64,
    scale_s: f64,
    margin_m: f64,
    value_out: *mut f64,
    grad_features_out: *mut f64,
    grad_prototypes_out: *mut f64,
) -> DbStatus {
    guard(|| {
        let x = matrix(slice_arg(features, batch * dim, "features")?, batch, dim)?;
        let y: Vec<usize> = slice_arg(labels, batch, "labels")?
            .iter()
            .map(|&l| l as usize)
            .collect();
        let w = matrix(
            slice_arg(prototypes, classes * dim, "prototypes")?,
            classes,
            dim,
        )?;
        let (kind, beta) = match kind {
            DbLossKind::Softmax => (LossKind::Softmax, Vec::new()),
            DbLossKind::Cosface => (LossKind::Cosface, Vec::new()),
            DbLossKind::Dbm => (LossKind::Dbm, slice_arg(beta, classes, "beta")?.to_vec()),
        };
        let cfg = LossConfig {
            kind,
            scale_s,
            margin_m,
            ..Default::default()
        };
        cfg.validate()?;
        let out = classification_forward(&FeatureBatch::new(x, y, false)?, &w, &beta, &cfg)?;
        *value_out.as_mut().ok_or_else(|| null("value_out"))? = out.value;
        if !grad_features_out.is_null() {
            out_slice(grad_features_out, batch * dim, "grad_features_out")?
                .copy_from_slice(out.grad_features.data());
        }
        if !grad_prototypes_out.is_null() {
            out_slice(grad_prototypes_out, classes * dim, "grad_prototypes_out")?
                .copy_from_slice(out.grad_prototypes.data());
        }
        Ok(())
    })
}

/// Best-threshold verification accuracy; `same[i]` is non-zero for
/// same-identity pairs.
///
/// # Safety
/// `sims` and `same` must hold `n` values; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn db_verification_accuracy(
    sims: *const f64,
    same: *const u8,
    n: usize,
    accuracy_out: *mut f64,
    threshold_out: *mut f64,
) -> DbStatus {
    guard(|| {
        let s = slice_arg(sims, n, "sims")?;
        let y: Vec<bool> = slice_arg(same, n, "same")?
            .iter()
            .map(|&v| v != 0)
            .collect();
        let (acc, thr) = verification_accuracy(s, &y)?;
        *accuracy_out.as_mut().ok_or_else(|| null("accuracy_out"))? = acc;
        *threshold_out
            .as_mut()
            .ok_or_else(|| null("threshold_out"))? = thr;
        Ok(())
    })
}
