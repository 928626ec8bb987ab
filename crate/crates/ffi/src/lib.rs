//! C ABI over the odediscover library.
//!
//! Every function returns an [`OddStatus`]; on failure the message is kept
//! per thread and can be fetched with [`odd_last_error`]. Handles are
//! opaque and must be released with their `_free` function. Strings
//! returned through out-pointers are owned by the caller and released
//! with [`odd_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use odediscover::adapt::{adapt, default_library, evaluate, forecast, AdaptConfig, Method};
use odediscover::io::{load_dataset, load_model, save_dataset, save_model};
use odediscover::model::{extract_equation, MetaModel};
use odediscover::ode_sim::{TimeGrid, Trajectory};
use odediscover::systems::{generate, Dataset, Split, SystemKind};
use odediscover::trainer::{sweep_and_select, SweepGrid};
use odediscover::Error;

/// Result of every call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OddStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Diverged = 5,
    Numerical = 6,
    AllConfigsFailed = 7,
    Panic = 8,
}

/// Opaque dataset handle.
pub struct OddDataset(Dataset);

/// Opaque model handle.
pub struct OddModel(MetaModel);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> OddStatus {
    match e {
        Error::Io(_) => OddStatus::Io,
        Error::Parse(_) => OddStatus::Parse,
        Error::Diverged { .. } | Error::SimulationDiverged { .. } => OddStatus::Diverged,
        Error::NonFinite(_) | Error::SingularFit | Error::ZeroVariance | Error::FailedConfig(_) => OddStatus::Numerical,
        Error::AllConfigsFailed => OddStatus::AllConfigsFailed,
        _ => OddStatus::InvalidArgument,
    }
}

/// Run `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (OddStatus, String)>) -> OddStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => OddStatus::Ok,
        Ok(Err((s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            OddStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (OddStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (OddStatus, String) {
    (OddStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (OddStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| (OddStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn out_string(out: *mut *mut c_char, s: String) -> Result<(), (OddStatus, String)> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    let c = CString::new(s).map_err(|_| (OddStatus::Numerical, "string contains a nul byte".to_string()))?;
    *out = c.into_raw();
    Ok(())
}

/// Copy of the calling thread's last error message, or null when none.
/// Release with [`odd_string_free`].
#[no_mangle]
pub extern "C" fn odd_last_error() -> *mut c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null_mut(), |c| c.clone().into_raw()))
}

/// Release a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn odd_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn odd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Simulate `n_tasks` trajectories of `system` ("pendulum", "predator_prey",
/// "sir", "complex_ode") in `split` ("id", "ood-x0", "ood-x0-w") with the
/// system's default grid; a negative `noise` selects the default noise.
///
/// # Safety
/// Strings must be nul-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn odd_dataset_generate(
    system: *const c_char,
    split: *const c_char,
    n_tasks: usize,
    noise: f64,
    seed: u64,
    out: *mut *mut OddDataset,
) -> OddStatus {
    guard(|| {
        let kind: SystemKind = str_arg(system, "system")?.parse().map_err(lib_err)?;
        let split: Split = str_arg(split, "split")?.parse().map_err(lib_err)?;
        if out.is_null() {
            return Err(null("output pointer"));
        }
        let noise = if noise < 0.0 { kind.default_noise() } else { noise };
        let data = generate(&kind.spec(), &kind.environment(split), n_tasks, &kind.default_grid(), noise, seed)
            .map_err(lib_err)?;
        *out = Box::into_raw(Box::new(OddDataset(data)));
        Ok(())
    })
}

/// # Safety
/// `dir` must be nul-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn odd_dataset_load(dir: *const c_char, out: *mut *mut OddDataset) -> OddStatus {
    guard(|| {
        let dir = PathBuf::from(str_arg(dir, "dir")?);
        if out.is_null() {
            return Err(null("output pointer"));
        }
        *out = Box::into_raw(Box::new(OddDataset(load_dataset(&dir).map_err(lib_err)?)));
        Ok(())
    })
}

/// # Safety
/// `data` must be a live handle; `dir` must be nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn odd_dataset_save(data: *const OddDataset, dir: *const c_char) -> OddStatus {
    guard(|| {
        let data = data.as_ref().ok_or_else(|| null("dataset"))?;
        save_dataset(&data.0, &PathBuf::from(str_arg(dir, "dir")?)).map_err(lib_err)
    })
}

/// Number of tasks, or 0 for a null handle.
///
/// # Safety
/// `data` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn odd_dataset_n_tasks(data: *const OddDataset) -> usize {
    data.as_ref().map_or(0, |d| d.0.tasks.len())
}

/// State dimension, or 0 for a null handle.
///
/// # Safety
/// `data` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn odd_dataset_dim(data: *const OddDataset) -> usize {
    data.as_ref().map_or(0, |d| d.0.system.d)
}

/// # Safety
/// `data` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn odd_dataset_free(data: *mut OddDataset) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

/// Train the default hyperparameter grid on `train` (its last 20% of tasks
/// validate) and return the selected model. `epochs == 0` keeps the default.
///
/// # Safety
/// `train` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn odd_sweep(
    train: *const OddDataset,
    epochs: usize,
    seed: u64,
    out: *mut *mut OddModel,
) -> OddStatus {
    guard(|| {
        let data = &train.as_ref().ok_or_else(|| null("dataset"))?.0;
        if out.is_null() {
            return Err(null("output pointer"));
        }
        let mut grid = SweepGrid::default();
        if epochs > 0 {
            grid.base.epochs = epochs;
        }
        let (fit, val) = data.split_validation(0.2);
        let (model, _) =
            sweep_and_select(&fit, &val, &default_library(data.system.kind), &grid, seed).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(OddModel(model)));
        Ok(())
    })
}

/// # Safety
/// `path` must be nul-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn odd_model_load(path: *const c_char, out: *mut *mut OddModel) -> OddStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(path, "path")?);
        if out.is_null() {
            return Err(null("output pointer"));
        }
        *out = Box::into_raw(Box::new(OddModel(load_model(&path).map_err(lib_err)?)));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; `path` must be nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn odd_model_save(model: *const OddModel, path: *const c_char) -> OddStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        save_model(&model.0, &PathBuf::from(str_arg(path, "path")?)).map_err(lib_err)
    })
}

/// Number of open gates, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn odd_model_n_active(model: *const OddModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.gates().n_active())
}

/// Symbolic equations of the model with coefficient placeholders.
///
/// # Safety
/// `model` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn odd_model_equation(model: *const OddModel, out: *mut *mut c_char) -> OddStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        out_string(out, extract_equation(&model.0, None))
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn odd_model_free(model: *mut OddModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Adapt to an observed prefix and forecast from its last state.
///
/// `prefix` holds `n_rows x d` row-major states sampled every `dt`;
/// `out` receives `(horizon_steps + 1) x d` states, the first row being
/// the last prefix state.
///
/// # Safety
/// `prefix` must hold `n_rows * d` values and `out` `(horizon_steps + 1) * d`.
#[no_mangle]
pub unsafe extern "C" fn odd_adapt_forecast(
    model: *const OddModel,
    prefix: *const f64,
    n_rows: usize,
    d: usize,
    dt: f64,
    horizon_steps: usize,
    out: *mut f64,
) -> OddStatus {
    guard(|| {
        let model = &model.as_ref().ok_or_else(|| null("model"))?.0;
        if prefix.is_null() || out.is_null() {
            return Err(null("buffer"));
        }
        if d != model.d() || n_rows < 2 {
            return Err((OddStatus::InvalidArgument, format!("need at least 2 rows of dimension {}", model.d())));
        }
        let values = std::slice::from_raw_parts(prefix, n_rows * d);
        let grid = TimeGrid::new(0.0, dt, n_rows - 1).map_err(lib_err)?;
        let traj = Trajectory::new(grid, values.chunks(d).map(<[f64]>::to_vec).collect()).map_err(lib_err)?;
        let adapted = adapt(model, &traj, &AdaptConfig::default()).map_err(lib_err)?;
        let horizon = grid.shifted(n_rows - 1, horizon_steps);
        let f = forecast(model, &adapted.weights, &traj, &horizon).map_err(lib_err)?;
        let dst = std::slice::from_raw_parts_mut(out, (horizon_steps + 1) * d);
        for (chunk, s) in dst.chunks_mut(d).zip(&f.states) {
            chunk.copy_from_slice(s);
        }
        Ok(())
    })
}

/// Adapt and score every task of `test`; writes the mean NRMSE over
/// scored tasks (NaN when none) and the NaN* count.
///
/// # Safety
/// Handles must be live; out-pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn odd_evaluate(
    model: *const OddModel,
    test: *const OddDataset,
    seed: u64,
    mean_nrmse: *mut f64,
    nan_star_count: *mut usize,
) -> OddStatus {
    guard(|| {
        let model = &model.as_ref().ok_or_else(|| null("model"))?.0;
        let test = &test.as_ref().ok_or_else(|| null("dataset"))?.0;
        if mean_nrmse.is_null() || nan_star_count.is_null() {
            return Err(null("output pointer"));
        }
        let (report, _) = evaluate(model, test, &Method::Adapt(AdaptConfig::default()), seed).map_err(lib_err)?;
        *mean_nrmse = report.mean.unwrap_or(f64::NAN);
        *nan_star_count = report.nan_star_count;
        Ok(())
    })
}
