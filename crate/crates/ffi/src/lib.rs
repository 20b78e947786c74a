//! C ABI over trained clustering artifacts: load, predict, class
//! probabilities and certified radii.
//!
//! Every function returns a [`ClustrStatus`]. On failure a message is kept
//! in thread-local storage and can be read with [`clustr_last_error`].
//! Artifacts are opaque handles released with [`clustr_artifact_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use clustr::certify::select_centroid_pair;
use clustr::metric::infer;
use clustr::train::TrainedArtifact;
use clustr::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClustrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Infeasible = 5,
    Degenerate = 6,
    Panic = 7,
}

/// A loaded artifact together with its cached Lipschitz bound.
pub struct ClustrArtifact {
    inner: TrainedArtifact,
    lipschitz: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> ClustrStatus {
    match e {
        Error::DimensionMismatch { .. } | Error::InvalidInput(_) | Error::Config(_) => ClustrStatus::InvalidArgument,
        Error::Infeasible(_) => ClustrStatus::Infeasible,
        Error::DegenerateModel(_) => ClustrStatus::Degenerate,
        Error::Parse { .. } | Error::Json(_) => ClustrStatus::Parse,
        Error::Io(_) => ClustrStatus::Io,
    }
}

struct Fail(ClustrStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(ClustrStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> ClustrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            ClustrStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            ClustrStatus::Panic
        }
    }
}

unsafe fn handle<'a>(p: *const ClustrArtifact) -> Result<&'a ClustrArtifact, Fail> {
    p.as_ref().ok_or_else(|| null("artifact"))
}

unsafe fn input<'a>(a: &ClustrArtifact, x: *const f64, len: usize) -> Result<&'a [f64], Fail> {
    if x.is_null() {
        return Err(null("input"));
    }
    let want = a.inner.net.input_dim();
    if len != want {
        return Err(Fail(ClustrStatus::InvalidArgument, format!("input has length {len}, expected {want}")));
    }
    Ok(slice::from_raw_parts(x, len))
}

fn wrap(inner: TrainedArtifact) -> *mut ClustrArtifact {
    let lipschitz = inner.net.lipschitz_upper_bound();
    Box::into_raw(Box::new(ClustrArtifact { inner, lipschitz }))
}

unsafe fn c_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(ClustrStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

/// Loads an `artifact.json` written by `clustr train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn clustr_artifact_load(path: *const c_char, out: *mut *mut ClustrArtifact) -> ClustrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = c_str(path, "path")?;
        *out = wrap(TrainedArtifact::load(path)?);
        Ok(())
    })
}

/// Parses an artifact from its JSON text.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn clustr_artifact_from_json(json: *const c_char, out: *mut *mut ClustrArtifact) -> ClustrStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let json = c_str(json, "json")?;
        *out = wrap(TrainedArtifact::from_json(json)?);
        Ok(())
    })
}

/// Releases an artifact. Null is ignored.
///
/// # Safety
/// `artifact` must come from a load function and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn clustr_artifact_free(artifact: *mut ClustrArtifact) {
    if !artifact.is_null() {
        drop(Box::from_raw(artifact));
    }
}

/// Input dimension, output dimension of the network and number of classes.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn clustr_artifact_dims(
    artifact: *const ClustrArtifact,
    input_dim: *mut usize,
    output_dim: *mut usize,
    num_classes: *mut usize,
) -> ClustrStatus {
    guard(|| {
        let a = handle(artifact)?;
        if input_dim.is_null() || output_dim.is_null() || num_classes.is_null() {
            return Err(null("output"));
        }
        *input_dim = a.inner.net.input_dim();
        *output_dim = a.inner.net.output_dim();
        *num_classes = a.inner.cluster_model.as_ref().map_or(a.inner.net.output_dim(), |m| m.num_classes());
        Ok(())
    })
}

/// Product of the per-layer spectral norms of the network.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn clustr_lipschitz(artifact: *const ClustrArtifact, out: *mut f64) -> ClustrStatus {
    guard(|| {
        let a = handle(artifact)?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = a.lipschitz;
        Ok(())
    })
}

/// Predicted class of `x` (length `len`).
///
/// # Safety
/// `x` must point to `len` doubles; other pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn clustr_predict(
    artifact: *const ClustrArtifact,
    x: *const f64,
    len: usize,
    out_class: *mut usize,
) -> ClustrStatus {
    guard(|| {
        let a = handle(artifact)?;
        let x = input(a, x, len)?;
        if out_class.is_null() {
            return Err(null("out_class"));
        }
        *out_class = a.inner.predict(x)?;
        Ok(())
    })
}

/// Soft class probabilities of `x`, written to `out` (length `out_len`,
/// equal to the number of classes). Clustering artifacts only.
///
/// # Safety
/// `x` must point to `len` doubles and `out` to `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn clustr_probabilities(
    artifact: *const ClustrArtifact,
    x: *const f64,
    len: usize,
    out: *mut f64,
    out_len: usize,
) -> ClustrStatus {
    guard(|| {
        let a = handle(artifact)?;
        let x = input(a, x, len)?;
        let model = a.inner.clusters()?;
        if out.is_null() {
            return Err(null("out"));
        }
        if out_len != model.num_classes() {
            return Err(Fail(
                ClustrStatus::InvalidArgument,
                format!("out has length {out_len}, expected {}", model.num_classes()),
            ));
        }
        let p = infer(&a.inner.net.forward(x)?, model, &a.inner.magnet);
        slice::from_raw_parts_mut(out, out_len).copy_from_slice(&p.probabilities);
        Ok(())
    })
}

/// Certified l2 radius of `x` and the nearest-centroid class it certifies.
/// A non-positive `lipschitz` uses the network's own bound.
///
/// # Safety
/// `x` must point to `len` doubles; other pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn clustr_certify(
    artifact: *const ClustrArtifact,
    x: *const f64,
    len: usize,
    lipschitz: f64,
    out_radius: *mut f64,
    out_class: *mut usize,
) -> ClustrStatus {
    guard(|| {
        let a = handle(artifact)?;
        let x = input(a, x, len)?;
        let model = a.inner.clusters()?;
        if out_radius.is_null() || out_class.is_null() {
            return Err(null("output"));
        }
        let l = if lipschitz > 0.0 { lipschitz } else { a.lipschitz };
        let f = a.inner.net.forward(x)?;
        *out_radius = clustr::certify::robust_radius(&f, model, l)?;
        *out_class = select_centroid_pair(&f, model)?.mu1.class;
        Ok(())
    })
}

/// Message of the last failed call on this thread, or an empty string.
/// Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn clustr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn clustr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}
