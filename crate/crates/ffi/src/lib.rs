//! C ABI over `lls-core`.
//!
//! Every fallible function returns an [`LlsStatus`]; on failure the message is
//! available from [`lls_last_error_message`] on the same thread. Objects are opaque
//! handles created by `*_new`/`*_load`/... and released with the matching `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use lls_core::schema::{MomentIndex, ResponsePattern};
use lls_core::{
    conditional_moments, estimate_plane, principal_angles, Basis, ConditionalMomentTable, Dataset,
    LlsError, MomentMatrix, PlaneConfig, Schema, SolverConfig, SyntheticModel,
};

/// Result of every fallible call. Values 3..=5 match the `lls` exit codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LlsStatus {
    Ok = 0,
    /// Null pointer, bad UTF-8, or a buffer that is too small.
    InvalidArgument = 2,
    Data = 3,
    NotApplicable = 4,
    Numerical = 5,
    /// A Rust panic was caught at the boundary.
    Internal = 6,
}

pub struct LlsSchema(Schema);
pub struct LlsDataset(Dataset);
pub struct LlsMomentMatrix(MomentMatrix);
pub struct LlsBasis(Basis);
pub struct LlsModel(SyntheticModel);
pub struct LlsMomentTable(ConditionalMomentTable);

/// Plane estimation settings. `k_override == 0` lets the spectrum choose K.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct LlsPlaneConfig {
    pub rank_threshold_factor: f64,
    pub eig_threshold_factor: f64,
    pub k_override: usize,
    pub weight_columns: bool,
}

/// Headline numbers from a plane fit.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct LlsPlaneSummary {
    pub k0: usize,
    pub k: usize,
    pub points: usize,
    pub residual: f64,
    pub rank_threshold: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

struct Fail(LlsStatus, String);

impl From<LlsError> for Fail {
    fn from(e: LlsError) -> Self {
        let status = match e.exit_code() {
            4 => LlsStatus::NotApplicable,
            5 => LlsStatus::Numerical,
            _ => LlsStatus::Data,
        };
        Fail(status, e.to_string())
    }
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(LlsStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> LlsStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LlsStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal error: {}", msg));
            LlsStatus::Internal
        }
    }
}

unsafe fn deref<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| invalid(format!("{} is null", what)))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(invalid("path is null"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| invalid("path is not valid UTF-8"))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(invalid(format!("{} is null", what)));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn put<T>(out: *mut *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(invalid("output pointer is null"));
    }
    *out = Box::into_raw(Box::new(value));
    Ok(())
}

unsafe fn copy_out(values: &[f64], out: *mut f64, capacity: usize, written: *mut usize) -> Result<(), Fail> {
    if !written.is_null() {
        *written = values.len();
    }
    if capacity < values.len() {
        return Err(invalid(format!("buffer holds {} values, need {}", capacity, values.len())));
    }
    if !values.is_empty() {
        if out.is_null() {
            return Err(invalid("output buffer is null"));
        }
        ptr::copy_nonoverlapping(values.as_ptr(), out, values.len());
    }
    Ok(())
}

unsafe fn release<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Release a handle; null is ignored.
///
/// # Safety
/// `p` is null or a live handle, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn lls_schema_free(p: *mut LlsSchema) {
    release(p)
}

/// Release a handle; null is ignored.
///
/// # Safety
/// `p` is null or a live handle, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn lls_dataset_free(p: *mut LlsDataset) {
    release(p)
}

/// Release a handle; null is ignored.
///
/// # Safety
/// `p` is null or a live handle, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn lls_moment_matrix_free(p: *mut LlsMomentMatrix) {
    release(p)
}

/// Release a handle; null is ignored.
///
/// # Safety
/// `p` is null or a live handle, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn lls_basis_free(p: *mut LlsBasis) {
    release(p)
}

/// Release a handle; null is ignored.
///
/// # Safety
/// `p` is null or a live handle, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn lls_model_free(p: *mut LlsModel) {
    release(p)
}

/// Release a handle; null is ignored.
///
/// # Safety
/// `p` is null or a live handle, freed at most once.
#[no_mangle]
pub unsafe extern "C" fn lls_moment_table_free(p: *mut LlsMomentTable) {
    release(p)
}

/// Message of the last failed call on this thread, or null. Valid until the next call.
#[no_mangle]
pub extern "C" fn lls_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version, static string.
#[no_mangle]
pub extern "C" fn lls_version() -> *const c_char {
    static V: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    V.as_ptr() as *const c_char
}

/// # Safety
/// `levels` points to `count` values; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn lls_schema_new(levels: *const usize, count: usize, out: *mut *mut LlsSchema) -> LlsStatus {
    guard(|| {
        let levels = slice_arg(levels, count, "levels")?.to_vec();
        put(out, LlsSchema(Schema::new(levels)?))
    })
}

/// # Safety
/// `path` is a nul-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn lls_schema_load(path: *const c_char, out: *mut *mut LlsSchema) -> LlsStatus {
    guard(|| put(out, LlsSchema(Schema::load(&path_arg(path)?)?)))
}

/// Number of variables J; 0 for null.
///
/// # Safety
/// `s` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lls_schema_num_vars(s: *const LlsSchema) -> usize {
    s.as_ref().map_or(0, |s| s.0.num_vars())
}

/// Total number of cells, the length of a basis vector; 0 for null.
///
/// # Safety
/// `s` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lls_schema_total_cells(s: *const LlsSchema) -> usize {
    s.as_ref().map_or(0, |s| s.0.total_cells())
}

/// # Safety
/// `path` is a nul-terminated string; `schema` a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lls_dataset_load(
    path: *const c_char,
    schema: *const LlsSchema,
    out: *mut *mut LlsDataset,
) -> LlsStatus {
    guard(|| {
        let schema = deref(schema, "schema")?;
        put(out, LlsDataset(Dataset::load(&path_arg(path)?, &schema.0)?))
    })
}

/// Build a dataset from `rows × J` row-major 1-based levels.
///
/// # Safety
/// `cells` points to `rows * J` values; `schema` is live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lls_dataset_from_rows(
    schema: *const LlsSchema,
    cells: *const u32,
    rows: usize,
    out: *mut *mut LlsDataset,
) -> LlsStatus {
    guard(|| {
        let schema = &deref(schema, "schema")?.0;
        let j = schema.num_vars();
        let len = rows.checked_mul(j).ok_or_else(|| invalid("row count overflows"))?;
        let flat = slice_arg(cells, len, "cells")?;
        let rows: Vec<Vec<u32>> = flat.chunks(j).map(|r| r.to_vec()).collect();
        put(out, LlsDataset(Dataset::new(schema.clone(), rows)?))
    })
}

/// Sample size; 0 for null.
///
/// # Safety
/// `d` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lls_dataset_n(d: *const LlsDataset) -> usize {
    d.as_ref().map_or(0, |d| d.0.n())
}

/// # Safety
/// `data` is live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lls_moment_matrix_from_dataset(
    data: *const LlsDataset,
    max_col_order: usize,
    out: *mut *mut LlsMomentMatrix,
) -> LlsStatus {
    guard(|| {
        let data = deref(data, "dataset")?;
        put(out, LlsMomentMatrix(MomentMatrix::from_dataset(&data.0, max_col_order)?))
    })
}

/// Moment matrix from the exact moments of a model.
///
/// # Safety
/// `model` is live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lls_moment_matrix_from_model(
    model: *const LlsModel,
    max_col_order: usize,
    out: *mut *mut LlsMomentMatrix,
) -> LlsStatus {
    guard(|| {
        let model = deref(model, "model")?;
        put(out, LlsMomentMatrix(MomentMatrix::from_source(&model.0, max_col_order)?))
    })
}

/// Writes the row and column counts.
///
/// # Safety
/// `m` is live; `rows` and `cols` writable.
#[no_mangle]
pub unsafe extern "C" fn lls_moment_matrix_shape(m: *const LlsMomentMatrix, rows: *mut usize, cols: *mut usize) -> LlsStatus {
    guard(|| {
        let m = deref(m, "matrix")?;
        if rows.is_null() || cols.is_null() {
            return Err(invalid("output pointer is null"));
        }
        *rows = m.0.num_rows();
        *cols = m.0.num_cols();
        Ok(())
    })
}

/// Write the matrix CSV (`"j:l"` row labels, `?` for unobserved cells).
///
/// # Safety
/// `m` is live; `path` nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn lls_moment_matrix_save_csv(m: *const LlsMomentMatrix, path: *const c_char) -> LlsStatus {
    guard(|| {
        let m = deref(m, "matrix")?;
        let path = path_arg(path)?;
        std::fs::write(&path, m.0.to_csv()).map_err(|e| Fail(LlsStatus::Data, format!("{}: {}", path.display(), e)))
    })
}

/// Default settings.
#[no_mangle]
pub extern "C" fn lls_plane_config_default() -> LlsPlaneConfig {
    let d = PlaneConfig::default();
    LlsPlaneConfig {
        rank_threshold_factor: d.rank_threshold_factor,
        eig_threshold_factor: d.eig_threshold_factor,
        k_override: 0,
        weight_columns: d.weight_columns,
    }
}

/// Estimate the basis of the plane. `config` and `summary` may be null.
///
/// # Safety
/// `m` is live; `config` null or readable; `out` writable; `summary` null or writable.
#[no_mangle]
pub unsafe extern "C" fn lls_estimate_plane(
    m: *const LlsMomentMatrix,
    config: *const LlsPlaneConfig,
    out: *mut *mut LlsBasis,
    summary: *mut LlsPlaneSummary,
) -> LlsStatus {
    guard(|| {
        let m = deref(m, "matrix")?;
        let c = config.as_ref().copied().unwrap_or_else(|| lls_plane_config_default());
        let cfg = PlaneConfig {
            rank_threshold_factor: c.rank_threshold_factor,
            eig_threshold_factor: c.eig_threshold_factor,
            k_override: (c.k_override > 0).then_some(c.k_override),
            weight_columns: c.weight_columns,
            ..PlaneConfig::default()
        };
        if !(cfg.rank_threshold_factor > 0.0 && cfg.eig_threshold_factor > 0.0) {
            return Err(invalid("threshold factors must be positive"));
        }
        let (basis, report) = estimate_plane(&m.0, &cfg)?;
        if let Some(s) = summary.as_mut() {
            *s = LlsPlaneSummary {
                k0: report.k0,
                k: report.k,
                points: report.points,
                residual: report.residual,
                rank_threshold: report.rank_threshold,
            };
        }
        put(out, LlsBasis(basis))
    })
}

/// Dimension K; 0 for null.
///
/// # Safety
/// `b` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lls_basis_k(b: *const LlsBasis) -> usize {
    b.as_ref().map_or(0, |b| b.0.k())
}

/// Copy the K basis vectors, each of length total cells, row-major into `out`.
/// `written` receives the required length even when the buffer is too small.
///
/// # Safety
/// `b` is live; `out` holds `capacity` doubles; `written` null or writable.
#[no_mangle]
pub unsafe extern "C" fn lls_basis_copy_vectors(
    b: *const LlsBasis,
    out: *mut f64,
    capacity: usize,
    written: *mut usize,
) -> LlsStatus {
    guard(|| {
        let b = deref(b, "basis")?;
        let flat: Vec<f64> = b.0.vectors().iter().flatten().copied().collect();
        copy_out(&flat, out, capacity, written)
    })
}

/// # Safety
/// `path` nul-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lls_basis_load(path: *const c_char, out: *mut *mut LlsBasis) -> LlsStatus {
    guard(|| put(out, LlsBasis(Basis::load(&path_arg(path)?)?)))
}

/// # Safety
/// `b` is live; `path` nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn lls_basis_save(b: *const LlsBasis, path: *const c_char) -> LlsStatus {
    guard(|| Ok(deref(b, "basis")?.0.save(&path_arg(path)?)?))
}

/// Principal angles between two bases of the same schema, ascending.
///
/// # Safety
/// `a`, `b` live; `out` holds `capacity` doubles; `written` null or writable.
#[no_mangle]
pub unsafe extern "C" fn lls_principal_angles(
    a: *const LlsBasis,
    b: *const LlsBasis,
    out: *mut f64,
    capacity: usize,
    written: *mut usize,
) -> LlsStatus {
    guard(|| {
        let angles = principal_angles(&deref(a, "a")?.0, &deref(b, "b")?.0)?;
        copy_out(&angles, out, capacity, written)
    })
}

/// Draw a synthetic model with `support` points on a K-dimensional plane.
///
/// # Safety
/// `schema` is live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lls_model_generate(
    schema: *const LlsSchema,
    k: usize,
    support: usize,
    seed: u64,
    out: *mut *mut LlsModel,
) -> LlsStatus {
    guard(|| {
        let schema = deref(schema, "schema")?;
        put(out, LlsModel(SyntheticModel::generate(&schema.0, k, support, seed)?))
    })
}

/// # Safety
/// `path` nul-terminated; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lls_model_load(path: *const c_char, out: *mut *mut LlsModel) -> LlsStatus {
    guard(|| put(out, LlsModel(SyntheticModel::load(&path_arg(path)?)?)))
}

/// # Safety
/// `m` is live; `path` nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn lls_model_save(m: *const LlsModel, path: *const c_char) -> LlsStatus {
    guard(|| Ok(deref(m, "model")?.0.save(&path_arg(path)?)?))
}

/// Copy of the model's true basis.
///
/// # Safety
/// `m` is live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lls_model_basis(m: *const LlsModel, out: *mut *mut LlsBasis) -> LlsStatus {
    guard(|| put(out, LlsBasis(deref(m, "model")?.0.basis().clone())))
}

/// # Safety
/// `m` is live; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lls_model_sample(m: *const LlsModel, n: usize, seed: u64, out: *mut *mut LlsDataset) -> LlsStatus {
    guard(|| put(out, LlsDataset(deref(m, "model")?.0.sample_dataset(n, seed)?)))
}

/// Solve for conditional moments up to order `moment_order` at `n_targets` patterns
/// (`n_targets × J` row-major, 0 = free). Frequencies come from `data` or, when it is
/// null, from the exact moments of `model`; exactly one must be given.
///
/// # Safety
/// `basis` live; `data`/`model` null or live; `targets` holds `n_targets * J` values.
#[no_mangle]
pub unsafe extern "C" fn lls_conditional_moments(
    basis: *const LlsBasis,
    data: *const LlsDataset,
    model: *const LlsModel,
    targets: *const u32,
    n_targets: usize,
    moment_order: usize,
    anchor_weight: f64,
    out: *mut *mut LlsMomentTable,
) -> LlsStatus {
    guard(|| {
        let basis = &deref(basis, "basis")?.0;
        let j = basis.schema().num_vars();
        let len = n_targets.checked_mul(j).ok_or_else(|| invalid("target count overflows"))?;
        let flat = slice_arg(targets, len, "targets")?;
        let targets = flat
            .chunks(j)
            .map(|c| ResponsePattern::new(basis.schema(), c.to_vec()))
            .collect::<Result<Vec<_>, _>>()?;
        let cfg = SolverConfig {
            moment_order,
            anchor_weight,
            ..SolverConfig::default()
        };
        let (table, _) = match (data.as_ref(), model.as_ref()) {
            (Some(d), None) => conditional_moments(basis, &d.0, &targets, &cfg)?,
            (None, Some(m)) => conditional_moments(basis, &m.0, &targets, &cfg)?,
            _ => return Err(invalid("pass exactly one of data and model")),
        };
        put(out, LlsMomentTable(table))
    })
}

/// `E(G^v | X = pattern)`; `pattern` has J entries, `powers` has K.
///
/// # Safety
/// `t` live; `pattern` and `powers` readable; `value` writable.
#[no_mangle]
pub unsafe extern "C" fn lls_moment_table_conditional(
    t: *const LlsMomentTable,
    pattern: *const u32,
    powers: *const u32,
    value: *mut f64,
) -> LlsStatus {
    guard(|| {
        let t = &deref(t, "table")?.0;
        if value.is_null() {
            return Err(invalid("value is null"));
        }
        let j = t.rows().first().map_or(0, |r| r.pattern.len());
        let k = t.rows().first().map_or(0, |r| r.index.dim());
        let p = ResponsePattern::from_entries(slice_arg(pattern, j, "pattern")?.to_vec());
        let v = MomentIndex::new(slice_arg(powers, k, "powers")?.to_vec());
        let c = t
            .conditional(&p, &v)
            .ok_or_else(|| Fail(LlsStatus::Data, format!("no conditional moment {} at {}", v, p)))?;
        *value = c;
        Ok(())
    })
}

/// Number of rows; 0 for null.
///
/// # Safety
/// `t` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lls_moment_table_len(t: *const LlsMomentTable) -> usize {
    t.as_ref().map_or(0, |t| t.0.rows().len())
}

/// Least-squares residual norm of the solve; NaN for null.
///
/// # Safety
/// `t` is null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lls_moment_table_residual_norm(t: *const LlsMomentTable) -> f64 {
    t.as_ref().and_then(|t| t.0.residual_norm()).unwrap_or(f64::NAN)
}

/// # Safety
/// `t` live; `path` nul-terminated.
#[no_mangle]
pub unsafe extern "C" fn lls_moment_table_save_csv(t: *const LlsMomentTable, path: *const c_char) -> LlsStatus {
    guard(|| Ok(deref(t, "table")?.0.save_csv(&path_arg(path)?)?))
}
