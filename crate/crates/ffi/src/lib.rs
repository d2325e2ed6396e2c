// SPDX-License-Identifier: MIT OR Apache-2.0

//! C interface to trained targets and decompositions.
//!
//! Handles are opaque and owned by the caller once returned; release them
//! with the matching `_free` function. Every fallible function returns a
//! [`SpdStatus`]; on failure a message is stored per thread and can be read
//! with [`spd_last_error_message`]. Matrices are row-major `double` arrays.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use spd_core::experiment::{load_spd, load_target};
use spd_core::metrics::{count_nonnegligible, ml2r, mmcs};
use spd_core::models::TargetModel;
use spd_core::spd::Decomposition;
use spd_core::tensor::DenseMatrix;
use spd_core::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    ShapeMismatch = 3,
    Io = 4,
    Checkpoint = 5,
    Numerical = 6,
    Config = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// A trained target model.
pub struct SpdTarget {
    model: TargetModel,
}

/// A decomposition together with the target it was trained on.
pub struct SpdDecomposition {
    target: TargetModel,
    dec: Decomposition,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

fn status_of(e: &Error) -> SpdStatus {
    match e {
        Error::Shape { .. } => SpdStatus::ShapeMismatch,
        Error::Config { .. } | Error::TomlParse(_) | Error::TomlWrite(_) => SpdStatus::Config,
        Error::InvalidArgument(_) => SpdStatus::InvalidArgument,
        Error::Numerical(_) => SpdStatus::Numerical,
        Error::Checkpoint { .. } | Error::Json(_) => SpdStatus::Checkpoint,
        Error::Io { .. } => SpdStatus::Io,
    }
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (SpdStatus, String)>) -> SpdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SpdStatus::Ok
        }
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SpdStatus::Panic
        }
    }
}

fn fail(e: Error) -> (SpdStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(name: &str) -> (SpdStatus, String) {
    (SpdStatus::NullPointer, format!("`{name}` is null"))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, (SpdStatus, String)> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p).to_str().map_err(|_| {
        (
            SpdStatus::InvalidArgument,
            "path is not valid UTF-8".to_string(),
        )
    })?;
    Ok(PathBuf::from(s))
}

unsafe fn input_matrix(
    x: *const f64,
    rows: usize,
    cols: usize,
) -> Result<DenseMatrix, (SpdStatus, String)> {
    if x.is_null() {
        return Err(null("x"));
    }
    let n = rows.checked_mul(cols).ok_or_else(|| {
        (
            SpdStatus::InvalidArgument,
            format!("{rows} x {cols} overflows"),
        )
    })?;
    let data = std::slice::from_raw_parts(x, n).to_vec();
    DenseMatrix::from_vec(rows, cols, data).map_err(fail)
}

unsafe fn write_out(
    m: &DenseMatrix,
    out: *mut f64,
    out_len: usize,
) -> Result<(), (SpdStatus, String)> {
    if out.is_null() {
        return Err(null("out"));
    }
    let n = m.data().len();
    if out_len < n {
        return Err((
            SpdStatus::BufferTooSmall,
            format!("output needs {n} doubles, buffer holds {out_len}"),
        ));
    }
    std::ptr::copy_nonoverlapping(m.data().as_ptr(), out, n);
    Ok(())
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length
/// excluding the terminator, so a caller can size the buffer.
#[no_mangle]
pub unsafe extern "C" fn spd_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            std::ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Loads a target checkpoint written by `spd train-target`.
#[no_mangle]
pub unsafe extern "C" fn spd_target_load(
    path: *const c_char,
    out: *mut *mut SpdTarget,
) -> SpdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let model = load_target(&path_arg(path)?).map_err(fail)?;
        *out = Box::into_raw(Box::new(SpdTarget { model }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn spd_target_free(target: *mut SpdTarget) {
    if !target.is_null() {
        drop(Box::from_raw(target));
    }
}

/// Input and output width of the model.
#[no_mangle]
pub unsafe extern "C" fn spd_target_n_features(
    target: *const SpdTarget,
    out: *mut usize,
) -> SpdStatus {
    guard(|| {
        let t = target.as_ref().ok_or_else(|| null("target"))?;
        let o = out.as_mut().ok_or_else(|| null("out"))?;
        *o = t.model.n_features();
        Ok(())
    })
}

/// Forward pass on `batch × n_features` inputs; writes `batch × n_features`
/// outputs.
#[no_mangle]
pub unsafe extern "C" fn spd_target_forward(
    target: *const SpdTarget,
    x: *const f64,
    batch: usize,
    n_features: usize,
    out: *mut f64,
    out_len: usize,
) -> SpdStatus {
    guard(|| {
        let t = target.as_ref().ok_or_else(|| null("target"))?;
        let x = input_matrix(x, batch, n_features)?;
        let y = t.model.forward(&x).map_err(fail)?;
        write_out(&y, out, out_len)
    })
}

/// Loads an SPD checkpoint written by `spd decompose`.
#[no_mangle]
pub unsafe extern "C" fn spd_decomposition_load(
    path: *const c_char,
    out: *mut *mut SpdDecomposition,
) -> SpdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let loaded = load_spd(&path_arg(path)?).map_err(fail)?;
        *out = Box::into_raw(Box::new(SpdDecomposition {
            target: loaded.target,
            dec: loaded.decomposition,
        }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn spd_decomposition_free(dec: *mut SpdDecomposition) {
    if !dec.is_null() {
        drop(Box::from_raw(dec));
    }
}

/// Number of decomposed matrices.
#[no_mangle]
pub unsafe extern "C" fn spd_decomposition_n_sites(
    dec: *const SpdDecomposition,
    out: *mut usize,
) -> SpdStatus {
    guard(|| {
        let d = dec.as_ref().ok_or_else(|| null("dec"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = d.dec.n_layers();
        Ok(())
    })
}

/// Number of subcomponents of matrix `site`.
#[no_mangle]
pub unsafe extern "C" fn spd_decomposition_n_subcomponents(
    dec: *const SpdDecomposition,
    site: usize,
    out: *mut usize,
) -> SpdStatus {
    guard(|| {
        let d = dec.as_ref().ok_or_else(|| null("dec"))?;
        check_site(d, site)?;
        *out.as_mut().ok_or_else(|| null("out"))? = d.dec.components.n_subcomponents(site);
        Ok(())
    })
}

fn check_site(d: &SpdDecomposition, site: usize) -> Result<(), (SpdStatus, String)> {
    if site >= d.dec.n_layers() {
        return Err((
            SpdStatus::InvalidArgument,
            format!("site {site} out of range for {} sites", d.dec.n_layers()),
        ));
    }
    Ok(())
}

fn site_weight(d: &SpdDecomposition, site: usize) -> Result<DenseMatrix, (SpdStatus, String)> {
    check_site(d, site)?;
    Ok(d.target.decomposed()[site].1.clone())
}

/// Mean max cosine similarity of matrix `site`.
#[no_mangle]
pub unsafe extern "C" fn spd_decomposition_mmcs(
    dec: *const SpdDecomposition,
    site: usize,
    out: *mut f64,
) -> SpdStatus {
    guard(|| {
        let d = dec.as_ref().ok_or_else(|| null("dec"))?;
        let w = site_weight(d, site)?;
        let r = mmcs(&w, &d.dec.components.u[site], &d.dec.components.v[site]).map_err(fail)?;
        *out.as_mut().ok_or_else(|| null("out"))? = r.mean;
        Ok(())
    })
}

/// Mean L2 ratio of matrix `site`.
#[no_mangle]
pub unsafe extern "C" fn spd_decomposition_ml2r(
    dec: *const SpdDecomposition,
    site: usize,
    out: *mut f64,
) -> SpdStatus {
    guard(|| {
        let d = dec.as_ref().ok_or_else(|| null("dec"))?;
        let w = site_weight(d, site)?;
        let (u, v) = (&d.dec.components.u[site], &d.dec.components.v[site]);
        let m = mmcs(&w, u, v).map_err(fail)?;
        let r = ml2r(&w, u, v, &m).map_err(fail)?;
        *out.as_mut().ok_or_else(|| null("out"))? = r.mean;
        Ok(())
    })
}

/// Subcomponents of `site` whose norm exceeds `threshold` times the
/// largest in that matrix.
#[no_mangle]
pub unsafe extern "C" fn spd_decomposition_count_nonnegligible(
    dec: *const SpdDecomposition,
    site: usize,
    threshold: f64,
    out: *mut usize,
) -> SpdStatus {
    guard(|| {
        let d = dec.as_ref().ok_or_else(|| null("dec"))?;
        check_site(d, site)?;
        let r = count_nonnegligible(&d.dec.components, site, threshold).map_err(fail)?;
        *out.as_mut().ok_or_else(|| null("out"))? = r.count;
        Ok(())
    })
}

/// Causal importances of matrix `site` for `batch × n_features` inputs;
/// writes `batch × C` values.
#[no_mangle]
pub unsafe extern "C" fn spd_decomposition_causal_importance(
    dec: *const SpdDecomposition,
    x: *const f64,
    batch: usize,
    n_features: usize,
    site: usize,
    out: *mut f64,
    out_len: usize,
) -> SpdStatus {
    guard(|| {
        let d = dec.as_ref().ok_or_else(|| null("dec"))?;
        check_site(d, site)?;
        let x = input_matrix(x, batch, n_features)?;
        let g = d.dec.causal_importances(&d.target, &x).map_err(fail)?;
        write_out(&g[site], out, out_len)
    })
}
