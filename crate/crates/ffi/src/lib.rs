//! C ABI over the bowlkit core: exemplar sets behind an opaque handle, plus
//! IoU and Otsu threshold helpers.
//!
//! Every fallible call returns a [`BowlStatus`]. On failure the message is
//! kept per thread and can be read with [`bowl_last_error_message`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;
use std::slice;

use bowlkit::codebook::{build_exemplars, ExemplarSet, Provenance};
use bowlkit::geometry::{iou, BBox};
use bowlkit::labeler::otsu_gamma;
use bowlkit::store::normalize;
use bowlkit::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BowlStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Dimension = 5,
    Config = 6,
    Degenerate = 7,
    Panic = 8,
    Other = 9,
}

impl From<&Error> for BowlStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Io { .. } => BowlStatus::Io,
            Error::BadMagic { .. }
            | Error::VersionMismatch { .. }
            | Error::Truncated(_)
            | Error::Format(_)
            | Error::Parse { .. }
            | Error::Json { .. } => BowlStatus::Format,
            Error::Dimension { .. } => BowlStatus::Dimension,
            Error::Config(_) => BowlStatus::Config,
            Error::Degenerate(_) => BowlStatus::Degenerate,
            _ => BowlStatus::Other,
        }
    }
}

/// Opaque exemplar set.
pub struct BowlExemplarSet(ExemplarSet);

/// Axis-aligned box, top-left corner plus size.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct BowlBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

struct Fail(BowlStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail((&e).into(), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(BowlStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> BowlStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            BowlStatus::Ok
        }
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            BowlStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(BowlStatus::InvalidArgument, "path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn set_ref<'a>(h: *const BowlExemplarSet) -> Result<&'a ExemplarSet, Fail> {
    h.as_ref().map(|s| &s.0).ok_or_else(|| null("exemplar set"))
}

unsafe fn put_handle(out: *mut *mut BowlExemplarSet, set: ExemplarSet) -> Result<(), Fail> {
    *out = Box::into_raw(Box::new(BowlExemplarSet(set)));
    Ok(())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn bowl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn bowl_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Build an exemplar set from `n` row-major vectors of length `dim`.
/// Rows need not be unit length.
///
/// # Safety
/// `data` must point to `n * dim` floats and `out` to writable storage.
#[no_mangle]
pub unsafe extern "C" fn bowl_exemplar_set_build(
    data: *const f32,
    n: usize,
    dim: usize,
    lambda: f32,
    out: *mut *mut BowlExemplarSet,
) -> BowlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if data.is_null() && n > 0 {
            return Err(null("data"));
        }
        let len = n
            .checked_mul(dim)
            .ok_or_else(|| Fail(BowlStatus::InvalidArgument, "n * dim overflows".into()))?;
        let rows: &[f32] = if len == 0 { &[] } else { slice::from_raw_parts(data, len) };
        let stream = rows
            .chunks(dim.max(1))
            .enumerate()
            .map(|(i, v)| (Provenance { image_id: 0, row: 0, col: i as u32 }, v));
        let set = build_exemplars(stream, dim, lambda)?;
        put_handle(out, set)
    })
}

/// Load an exemplar file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn bowl_exemplar_set_load(
    path: *const c_char,
    out: *mut *mut BowlExemplarSet,
) -> BowlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let set = ExemplarSet::load(path_arg(path)?)?;
        put_handle(out, set)
    })
}

/// Write an exemplar file.
///
/// # Safety
/// `set` must come from this library and `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn bowl_exemplar_set_save(
    set: *const BowlExemplarSet,
    path: *const c_char,
) -> BowlStatus {
    guard(|| Ok(set_ref(set)?.save(path_arg(path)?)?))
}

/// The `n` most-counted exemplars as a new set.
///
/// # Safety
/// `set` must come from this library and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bowl_exemplar_set_top_n(
    set: *const BowlExemplarSet,
    n: usize,
    out: *mut *mut BowlExemplarSet,
) -> BowlStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let top = set_ref(set)?.top_n(n)?;
        put_handle(out, top)
    })
}

/// Number of exemplars; 0 for a null handle.
///
/// # Safety
/// `set` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn bowl_exemplar_set_len(set: *const BowlExemplarSet) -> usize {
    set.as_ref().map_or(0, |s| s.0.len())
}

/// Embedding dimension; 0 for a null handle.
///
/// # Safety
/// `set` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn bowl_exemplar_set_dim(set: *const BowlExemplarSet) -> usize {
    set.as_ref().map_or(0, |s| s.0.dim())
}

/// Nearest-neighbour count of exemplar `index`.
///
/// # Safety
/// `set` must come from this library and `count` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bowl_exemplar_set_count(
    set: *const BowlExemplarSet,
    index: usize,
    count: *mut u64,
) -> BowlStatus {
    guard(|| {
        let s = set_ref(set)?;
        if count.is_null() {
            return Err(null("count"));
        }
        let info = s.info().get(index).ok_or_else(|| {
            Fail(BowlStatus::InvalidArgument, format!("index {index} out of {}", s.len()))
        })?;
        *count = info.count;
        Ok(())
    })
}

/// Maximum cosine similarity to the set for each of `n` query rows. Queries
/// are normalized first.
///
/// # Safety
/// `queries` must hold `n * dim` floats and `out` room for `n`.
#[no_mangle]
pub unsafe extern "C" fn bowl_exemplar_set_s_max(
    set: *const BowlExemplarSet,
    queries: *const f32,
    n: usize,
    out: *mut f32,
) -> BowlStatus {
    guard(|| {
        let s = set_ref(set)?;
        if n == 0 {
            return Ok(());
        }
        if queries.is_null() || out.is_null() {
            return Err(null("buffer"));
        }
        let d = s.dim();
        let q = slice::from_raw_parts(queries, n * d);
        let mut unit = Vec::with_capacity(q.len());
        for row in q.chunks_exact(d) {
            unit.extend(normalize(row)?);
        }
        let r = s.s_max_batch(&unit)?;
        slice::from_raw_parts_mut(out, n).copy_from_slice(&r);
        Ok(())
    })
}

/// Release a set. Null is ignored.
///
/// # Safety
/// `set` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bowl_exemplar_set_free(set: *mut BowlExemplarSet) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}

/// Intersection over union; 0 when the union is empty.
#[no_mangle]
pub extern "C" fn bowl_iou(a: BowlBox, b: BowlBox) -> f64 {
    iou(&BBox::new(a.x, a.y, a.w, a.h), &BBox::new(b.x, b.y, b.w, b.h))
}

/// Otsu threshold over `n` scores with `bins` histogram bins.
///
/// # Safety
/// `values` must hold `n` doubles and `gamma` must be writable.
#[no_mangle]
pub unsafe extern "C" fn bowl_otsu_gamma(
    values: *const f64,
    n: usize,
    bins: usize,
    gamma: *mut f64,
) -> BowlStatus {
    guard(|| {
        if gamma.is_null() || (values.is_null() && n > 0) {
            return Err(null("buffer"));
        }
        let v: &[f64] = if n == 0 { &[] } else { slice::from_raw_parts(values, n) };
        *gamma = otsu_gamma(v, bins)?;
        Ok(())
    })
}
