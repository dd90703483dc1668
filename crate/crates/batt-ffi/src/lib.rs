//! C ABI over the block-sparse attention library.
//!
//! Handles are opaque pointers owned by the library; every constructor has
//! a matching `_free`. Functions return 0 on success or a stable error
//! code, and `batt_last_error_message` describes the most recent failure
//! on the calling thread. Mode fields travel as plain integers so that
//! out-of-range values fail with a code instead of corrupting state. The
//! generated header lives in `include/batt.h`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use batt_core::report::{to_json_string, RunConfig};
use batt_core::rng::Dist;
use batt_core::runner::execute_run;
use batt_core::select::{apply_permutation, select_pattern, CompMode, SortMode};
use batt_core::sparse::block_sparse_attention;
use batt_core::tensor::TokenMatrix;
use batt_core::{blocks, io, Error};

/// Success.
pub const BATT_OK: i32 = 0;
/// A required pointer argument was null.
pub const BATT_ERR_NULL: i32 = 100;
/// The call panicked; state may be inconsistent.
pub const BATT_ERR_PANIC: i32 = 101;
/// A mode field held an unknown value.
pub const BATT_ERR_ENUM: i32 = 102;
/// A path argument was not valid UTF-8.
pub const BATT_ERR_PATH: i32 = 103;

/// `sort` value: keep token order.
pub const BATT_SORT_NONE: i32 = 0;
/// `sort` value: reorder query tokens by norm.
pub const BATT_SORT_Q: i32 = 1;
/// `sort` value: reorder key tokens by norm.
pub const BATT_SORT_K: i32 = 2;
/// `sort` value: reorder both query and key tokens by norm.
pub const BATT_SORT_QK: i32 = 3;

/// `comp` value: raw block logits.
pub const BATT_COMP_NONE: i32 = 0;
/// `comp` value: exact covariance-trace correction.
pub const BATT_COMP_EXACT: i32 = 1;
/// `comp` value: diagonal covariance correction.
pub const BATT_COMP_DIAG: i32 = 2;

/// `dist` value: Gaussian tokens with a linear amplitude ramp.
pub const BATT_DIST_GAUSSIAN: i32 = 0;
/// `dist` value: lognormal-scaled unit directions.
pub const BATT_DIST_HEAVY: i32 = 1;

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: &str) {
    let owned = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(owned));
}

fn fail(err: &Error) -> i32 {
    set_error(&err.to_string());
    err.code()
}

fn fail_null(what: &str) -> i32 {
    set_error(&format!("{what} must not be null"));
    BATT_ERR_NULL
}

fn fail_enum(field: &str, got: i32) -> i32 {
    set_error(&format!("{field} does not accept {got}"));
    BATT_ERR_ENUM
}

fn guarded(f: impl FnOnce() -> i32) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(code) => code,
        Err(_) => {
            set_error("internal panic");
            BATT_ERR_PANIC
        }
    }
}

/// Message for the most recent error on this thread, or null if none.
/// The pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn batt_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| {
        slot.borrow()
            .as_ref()
            .map_or(ptr::null(), |msg| msg.as_ptr())
    })
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn batt_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Frees a string returned by this library. Null is ignored.
///
/// # Safety
/// `s` must be a pointer returned by a `batt_` function that documents
/// this deallocator, and must not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn batt_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

// ── tensors ─────────────────────────────────────────────────────────────

/// Opaque row-major matrix of finite doubles.
pub struct BattTensor(TokenMatrix);

/// Builds a tensor from a row-major buffer of `rows * cols` doubles.
///
/// # Safety
/// `data` must point to `rows * cols` readable doubles and `out` to a
/// writable pointer slot.
#[no_mangle]
pub unsafe extern "C" fn batt_tensor_new(
    rows: usize,
    cols: usize,
    data: *const f64,
    out: *mut *mut BattTensor,
) -> i32 {
    guarded(|| {
        if out.is_null() {
            return fail_null("out");
        }
        if data.is_null() {
            return fail_null("data");
        }
        let Some(len) = rows.checked_mul(cols) else {
            return fail(&Error::DimOverflow {
                rows: rows as u64,
                cols: cols as u64,
            });
        };
        let slice = std::slice::from_raw_parts(data, len);
        match TokenMatrix::new(rows, cols, slice.to_vec()) {
            Ok(m) => {
                *out = Box::into_raw(Box::new(BattTensor(m)));
                BATT_OK
            }
            Err(e) => fail(&e),
        }
    })
}

/// Frees a tensor. Null is ignored.
///
/// # Safety
/// `t` must be a pointer returned by this library and must not be used
/// afterwards.
#[no_mangle]
pub unsafe extern "C" fn batt_tensor_free(t: *mut BattTensor) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// Row count, or 0 when `t` is null.
///
/// # Safety
/// `t` must be null or a live tensor handle.
#[no_mangle]
pub unsafe extern "C" fn batt_tensor_rows(t: *const BattTensor) -> usize {
    t.as_ref().map_or(0, |t| t.0.rows())
}

/// Column count, or 0 when `t` is null.
///
/// # Safety
/// `t` must be null or a live tensor handle.
#[no_mangle]
pub unsafe extern "C" fn batt_tensor_cols(t: *const BattTensor) -> usize {
    t.as_ref().map_or(0, |t| t.0.cols())
}

/// Pointer to the tensor's row-major data, valid while the handle lives.
/// Null when `t` is null.
///
/// # Safety
/// `t` must be null or a live tensor handle.
#[no_mangle]
pub unsafe extern "C" fn batt_tensor_data(t: *const BattTensor) -> *const f64 {
    t.as_ref().map_or(ptr::null(), |t| t.0.as_slice().as_ptr())
}

fn path_from_c(raw: *const c_char) -> Result<PathBuf, i32> {
    if raw.is_null() {
        return Err(fail_null("path"));
    }
    let c = unsafe { CStr::from_ptr(raw) };
    match c.to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => {
            set_error("path is not valid UTF-8");
            Err(BATT_ERR_PATH)
        }
    }
}

/// Reads a tensor file written in the library's binary format.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable slot.
#[no_mangle]
pub unsafe extern "C" fn batt_tensor_read(path: *const c_char, out: *mut *mut BattTensor) -> i32 {
    guarded(|| {
        if out.is_null() {
            return fail_null("out");
        }
        let path = match path_from_c(path) {
            Ok(p) => p,
            Err(code) => return code,
        };
        match io::read_tensor(&path) {
            Ok(m) => {
                *out = Box::into_raw(Box::new(BattTensor(m)));
                BATT_OK
            }
            Err(e) => fail(&e),
        }
    })
}

/// Writes a tensor file in the library's binary format.
///
/// # Safety
/// `path` must be a NUL-terminated string and `t` a live tensor handle.
#[no_mangle]
pub unsafe extern "C" fn batt_tensor_write(path: *const c_char, t: *const BattTensor) -> i32 {
    guarded(|| {
        let Some(tensor) = t.as_ref() else {
            return fail_null("t");
        };
        let path = match path_from_c(path) {
            Ok(p) => p,
            Err(code) => return code,
        };
        match io::write_tensor(&path, &tensor.0) {
            Ok(()) => BATT_OK,
            Err(e) => fail(&e),
        }
    })
}

// ── configuration ───────────────────────────────────────────────────────

/// Run settings; see `batt_config_default` for the defaults. The `sort`,
/// `comp`, and `dist` fields take the `BATT_SORT_*`, `BATT_COMP_*`, and
/// `BATT_DIST_*` values.
#[repr(C)]
#[derive(Clone, Copy)]
pub struct BattConfig {
    pub seq_len: usize,
    pub dim: usize,
    pub heads: usize,
    pub block_size: usize,
    pub density: f64,
    pub beta: f64,
    pub sort: i32,
    pub comp: i32,
    /// 0 disables windowed sorting; otherwise the window length.
    pub sort_window: usize,
    pub dist: i32,
    pub seed: u64,
    pub dense_cap: usize,
}

fn config_to_core(c: &BattConfig) -> Result<RunConfig, i32> {
    let sort = match c.sort {
        BATT_SORT_NONE => SortMode::None,
        BATT_SORT_Q => SortMode::Q,
        BATT_SORT_K => SortMode::K,
        BATT_SORT_QK => SortMode::Qk,
        other => return Err(fail_enum("sort", other)),
    };
    let comp = match c.comp {
        BATT_COMP_NONE => CompMode::None,
        BATT_COMP_EXACT => CompMode::Exact,
        BATT_COMP_DIAG => CompMode::Diag,
        other => return Err(fail_enum("comp", other)),
    };
    let dist = match c.dist {
        BATT_DIST_GAUSSIAN => Dist::Gaussian,
        BATT_DIST_HEAVY => Dist::Heavy,
        other => return Err(fail_enum("dist", other)),
    };
    Ok(RunConfig {
        seq_len: c.seq_len,
        dim: c.dim,
        heads: c.heads,
        block_size: c.block_size,
        density: c.density,
        beta: c.beta,
        sort,
        comp,
        sort_window: (c.sort_window > 0).then_some(c.sort_window),
        dist,
        seed: c.seed,
        dense_cap: c.dense_cap,
    })
}

/// Fills `out` with the default configuration.
///
/// # Safety
/// `out` must point to writable `BattConfig` storage.
#[no_mangle]
pub unsafe extern "C" fn batt_config_default(out: *mut BattConfig) -> i32 {
    guarded(|| {
        if out.is_null() {
            return fail_null("out");
        }
        let d = RunConfig::default();
        *out = BattConfig {
            seq_len: d.seq_len,
            dim: d.dim,
            heads: d.heads,
            block_size: d.block_size,
            density: d.density,
            beta: d.beta,
            sort: BATT_SORT_QK,
            comp: BATT_COMP_DIAG,
            sort_window: 0,
            dist: BATT_DIST_GAUSSIAN,
            seed: d.seed,
            dense_cap: d.dense_cap,
        };
        BATT_OK
    })
}

// ── attention ───────────────────────────────────────────────────────────

/// Runs pattern selection and block-sparse attention on the given Q, K, V
/// and stores the output matrix in `out`. Only `block_size`, `density`,
/// `beta`, `sort`, `comp`, and `sort_window` are read from the config.
///
/// # Safety
/// `q`, `k`, `v` must be live tensor handles and `out` a writable slot.
#[no_mangle]
pub unsafe extern "C" fn batt_attend(
    q: *const BattTensor,
    k: *const BattTensor,
    v: *const BattTensor,
    config: *const BattConfig,
    out: *mut *mut BattTensor,
) -> i32 {
    guarded(|| {
        if out.is_null() {
            return fail_null("out");
        }
        let (Some(q), Some(k), Some(v)) = (q.as_ref(), k.as_ref(), v.as_ref()) else {
            return fail_null("q, k, and v");
        };
        let Some(config) = config.as_ref() else {
            return fail_null("config");
        };
        let cfg = match config_to_core(config) {
            Ok(c) => c,
            Err(code) => return code,
        };
        let result = (|| {
            let (perm_q, perm_k, score) = select_pattern(&q.0, &k.0, &cfg.select_config())?;
            let qp = apply_permutation(&q.0, &perm_q)?;
            let kp = apply_permutation(&k.0, &perm_k)?;
            let vp = apply_permutation(&v.0, &perm_k)?;
            let grid_q = blocks::make_grid(qp.rows(), cfg.block_size)?;
            let grid_k = blocks::make_grid(kp.rows(), cfg.block_size)?;
            let sparse =
                block_sparse_attention(&qp, &kp, &vp, &grid_q, &grid_k, &score.mask, &perm_q)?;
            Ok::<TokenMatrix, Error>(sparse.output)
        })();
        match result {
            Ok(output) => {
                *out = Box::into_raw(Box::new(BattTensor(output)));
                BATT_OK
            }
            Err(e) => fail(&e),
        }
    })
}

/// Runs the full seeded pipeline for `config` and stores the JSON report
/// in `out_json`. Free the string with `batt_string_free`.
///
/// # Safety
/// `config` must point to a `BattConfig` and `out_json` to a writable
/// pointer slot.
#[no_mangle]
pub unsafe extern "C" fn batt_run_json(
    config: *const BattConfig,
    out_json: *mut *mut c_char,
) -> i32 {
    guarded(|| {
        if out_json.is_null() {
            return fail_null("out_json");
        }
        let Some(config) = config.as_ref() else {
            return fail_null("config");
        };
        let cfg = match config_to_core(config) {
            Ok(c) => c,
            Err(code) => return code,
        };
        let report = match execute_run(&cfg, None) {
            Ok(r) => r,
            Err(e) => return fail(&e),
        };
        let text = match to_json_string(&report) {
            Ok(t) => t,
            Err(e) => return fail(&e),
        };
        match CString::new(text) {
            Ok(c) => {
                *out_json = c.into_raw();
                BATT_OK
            }
            Err(_) => {
                set_error("report contained an interior NUL byte");
                BATT_ERR_PANIC
            }
        }
    })
}
