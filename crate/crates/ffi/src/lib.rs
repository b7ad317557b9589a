//! C ABI for fitting, storing and evaluating vine copulas.
//!
//! Every fallible function returns an [`SvStatus`]; on failure the message
//! is kept per thread and can be copied out with [`sv_last_error`]. Models
//! are opaque [`SvVine`] handles released with [`sv_vine_free`].
#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use nalgebra::DMatrix;
use splinevine::dgp::{replicate_rng, DgpSpec};
use splinevine::io::write_atomic;
use splinevine::vine::{fit_vine, FitMode, FittedVine, VineConfig, VineEvaluator};
use splinevine::Error;

/// Result codes.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SvStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    FitFailed = 4,
    Io = 5,
    Parse = 6,
    Panic = 7,
}

/// Estimator selector for [`sv_vine_fit`].
pub const SV_MODE_SIMPA: c_int = 0;
pub const SV_MODE_COND: c_int = 1;
pub const SV_MODE_TEST: c_int = 2;

/// A fitted vine copula.
pub struct SvVine {
    inner: FittedVine,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(err: &Error) -> SvStatus {
    match err {
        Error::InvalidInput(_) | Error::OutOfUnitInterval { .. } | Error::InsufficientData(_) => SvStatus::InvalidArgument,
        Error::DimensionMismatch { .. } => SvStatus::DimensionMismatch,
        Error::Io(_) => SvStatus::Io,
        Error::Json(_) | Error::Csv { .. } => SvStatus::Parse,
        _ => SvStatus::FitFailed,
    }
}

fn guard<F: FnOnce() -> Result<(), (SvStatus, String)>>(f: F) -> SvStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SvStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SvStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (SvStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (SvStatus, String) {
    (SvStatus::NullPointer, format!("{what} is null"))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (SvStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (SvStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length without the NUL.
#[no_mangle]
pub unsafe extern "C" fn sv_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let k = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr() as *const c_char, buf, k);
            *buf.add(k) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sv_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Fits a vine to `n` observations of `p` variables stored row-major in
/// `data`, all in [0, 1]. `mode` is one of the `SV_MODE_*` constants.
#[no_mangle]
pub unsafe extern "C" fn sv_vine_fit(
    data: *const f64,
    n: usize,
    p: usize,
    mode: c_int,
    d: u32,
    d2: u32,
    d3: u32,
    alpha: f64,
    out: *mut *mut SvVine,
) -> SvStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if data.is_null() {
            return Err(null("data"));
        }
        let mode = match mode {
            SV_MODE_SIMPA => FitMode::SimpA,
            SV_MODE_COND => FitMode::Cond,
            SV_MODE_TEST => FitMode::Test,
            m => return Err((SvStatus::InvalidArgument, format!("unknown mode {m}"))),
        };
        let len = n.checked_mul(p).ok_or((SvStatus::InvalidArgument, "n * p overflows".to_string()))?;
        let u = DMatrix::from_row_slice(n, p, slice::from_raw_parts(data, len));
        let mut config = VineConfig::new(d, d2, d3).map_err(lib_err)?;
        config.alpha = alpha;
        let fv = fit_vine(&u, mode, &config).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(SvVine { inner: fv }));
        Ok(())
    })
}

/// Reads a model written by [`sv_vine_save`] or the command-line tool.
#[no_mangle]
pub unsafe extern "C" fn sv_vine_load(path: *const c_char, out: *mut *mut SvVine) -> SvStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = c_str(path, "path")?;
        let text = std::fs::read_to_string(path).map_err(|e| lib_err(Error::Io(e)))?;
        let fv = FittedVine::from_json(&text).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(SvVine { inner: fv }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn sv_vine_save(vine: *const SvVine, path: *const c_char) -> SvStatus {
    guard(|| {
        let vine = vine.as_ref().ok_or_else(|| null("vine"))?;
        let path = c_str(path, "path")?;
        let json = vine.inner.to_json().map_err(lib_err)?;
        write_atomic(Path::new(path), json.as_bytes()).map_err(lib_err)
    })
}

#[no_mangle]
pub unsafe extern "C" fn sv_vine_dim(vine: *const SvVine, out: *mut usize) -> SvStatus {
    guard(|| {
        let vine = vine.as_ref().ok_or_else(|| null("vine"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = vine.inner.structure.dim;
        Ok(())
    })
}

/// Log densities of `n` points (row-major, `p` columns) written to `out`.
#[no_mangle]
pub unsafe extern "C" fn sv_vine_log_density(
    vine: *const SvVine,
    u: *const f64,
    n: usize,
    p: usize,
    out: *mut f64,
) -> SvStatus {
    guard(|| {
        let vine = vine.as_ref().ok_or_else(|| null("vine"))?;
        if u.is_null() || out.is_null() {
            return Err(null("u or out"));
        }
        let dim = vine.inner.structure.dim;
        if p != dim {
            return Err(lib_err(Error::DimensionMismatch { expected: dim, found: p }));
        }
        let len = n.checked_mul(p).ok_or((SvStatus::InvalidArgument, "n * p overflows".to_string()))?;
        let pts = slice::from_raw_parts(u, len);
        let res = slice::from_raw_parts_mut(out, n);
        let ev = VineEvaluator::new(&vine.inner).map_err(lib_err)?;
        for (row, r) in pts.chunks_exact(p).zip(res.iter_mut()) {
            if let Some(&x) = row.iter().find(|x| !(0.0..=1.0).contains(*x)) {
                return Err(lib_err(Error::OutOfUnitInterval { value: x }));
            }
            *r = ev.log_density(row).map_err(lib_err)?;
        }
        Ok(())
    })
}

/// Releases a handle; null is ignored.
#[no_mangle]
pub unsafe extern "C" fn sv_vine_free(vine: *mut SvVine) {
    if !vine.is_null() {
        drop(Box::from_raw(vine));
    }
}

/// Draws `n` copula-scale observations of a DGP such as
/// `"frank:p=3,case=b,beta=0.6"` into `out` (row-major, `p` columns), using
/// replicate stream `stream` of `seed`.
#[no_mangle]
pub unsafe extern "C" fn sv_simulate(
    dgp: *const c_char,
    n: usize,
    p: usize,
    seed: u64,
    stream: u64,
    out: *mut f64,
) -> SvStatus {
    guard(|| {
        let spec: DgpSpec = c_str(dgp, "dgp")?.parse().map_err(lib_err)?;
        if spec.dim() != p {
            return Err(lib_err(Error::DimensionMismatch {
                expected: spec.dim(),
                found: p,
            }));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let dgp = spec.build().map_err(lib_err)?;
        let x = dgp.sample(n, &mut replicate_rng(seed, stream)).map_err(lib_err)?;
        let res = slice::from_raw_parts_mut(out, n * p);
        for i in 0..n {
            for j in 0..p {
                res[i * p + j] = x[(i, j)];
            }
        }
        Ok(())
    })
}
