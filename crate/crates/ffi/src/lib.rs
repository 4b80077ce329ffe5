//! C ABI over the taxiplace pipeline and recommender.
//!
//! Every function returns a [`TpStatus`]. On failure the message is kept per
//! thread and can be read with [`tp_last_error_message`]. Panics never cross
//! the boundary; they surface as `TP_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use taxiplace::pipeline::{Pipeline, Recommender};
use taxiplace::{Error, GeoPoint, PipelineConfig};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TpStatus {
    Ok = 0,
    NullPointer = 1,
    Config = 2,
    Data = 3,
    Numeric = 4,
    Io = 5,
    Provider = 6,
    InvalidArgument = 7,
    Panic = 8,
}

/// One ranked hotspot.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TpRankedHotspot {
    pub rank: u32,
    pub hotspot: u32,
    pub lat: f64,
    pub lon: f64,
    pub q_value: f64,
    pub distance_km: f64,
    pub congestion: f64,
}

/// Opaque handle to a recommender loaded from a run directory.
pub struct TpRecommender {
    inner: Recommender,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(err: &Error) -> TpStatus {
    match err {
        Error::Config { .. } => TpStatus::Config,
        Error::Data(_) | Error::Format { .. } => TpStatus::Data,
        Error::Numeric(_) => TpStatus::Numeric,
        Error::Io { .. } => TpStatus::Io,
        Error::Provider(_) => TpStatus::Provider,
    }
}

fn fail(status: TpStatus, msg: &str) -> TpStatus {
    set_last_error(msg);
    status
}

fn guard(f: impl FnOnce() -> Result<(), TpStatus>) -> TpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            TpStatus::Ok
        }
        Ok(Err(status)) => status,
        Err(_) => fail(TpStatus::Panic, "internal panic"),
    }
}

fn lift<T>(r: taxiplace::Result<T>) -> Result<T, TpStatus> {
    r.map_err(|e| fail(status_of(&e), &e.to_string()))
}

/// # Safety
/// `p` must be null or point to a NUL-terminated string.
unsafe fn path_arg(p: *const c_char, name: &str) -> Result<Option<PathBuf>, TpStatus> {
    if p.is_null() {
        return Ok(None);
    }
    // SAFETY: non-null and NUL-terminated per the caller contract.
    let s = unsafe { CStr::from_ptr(p) };
    s.to_str()
        .map(|s| Some(PathBuf::from(s)))
        .map_err(|_| fail(TpStatus::InvalidArgument, &format!("{name} is not valid UTF-8")))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn tp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or an empty string. The
/// pointer stays valid until the next call into this library on the same
/// thread.
#[no_mangle]
pub extern "C" fn tp_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Great-circle distance in kilometres.
///
/// # Safety
/// `out_km` must be null or valid for a write of one `double`.
#[no_mangle]
pub unsafe extern "C" fn tp_haversine_km(lat1: f64, lon1: f64, lat2: f64, lon2: f64, out_km: *mut f64) -> TpStatus {
    guard(|| {
        if out_km.is_null() {
            return Err(fail(TpStatus::NullPointer, "out_km is null"));
        }
        let a = lift(GeoPoint::new(lat1, lon1))?;
        let b = lift(GeoPoint::new(lat2, lon2))?;
        // SAFETY: checked non-null; writable per the caller contract.
        unsafe { *out_km = taxiplace::haversine_km(a, b) };
        Ok(())
    })
}

/// Runs every pipeline stage. `config_path` may be null for defaults;
/// `out_dir`, when non-null, overrides the configured run directory.
///
/// # Safety
/// Both pointers must be null or NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn tp_run_pipeline(config_path: *const c_char, out_dir: *const c_char) -> TpStatus {
    guard(|| {
        // SAFETY: forwarded caller contract.
        let config_path = unsafe { path_arg(config_path, "config_path") }?;
        // SAFETY: forwarded caller contract.
        let out_dir = unsafe { path_arg(out_dir, "out_dir") }?;
        let mut cfg = match config_path {
            Some(p) => lift(PipelineConfig::load(&p))?,
            None => PipelineConfig::default(),
        };
        if let Some(dir) = out_dir {
            cfg.out_dir = dir;
        }
        let pipeline = lift(Pipeline::new(cfg))?;
        pipeline
            .run()
            .map(|_| ())
            .map_err(|f| fail(status_of(&f.error), &f.to_string()))
    })
}

/// Loads the trained GNN+RL recommender from a run directory. On success
/// `*out` owns a handle to release with [`tp_recommender_free`].
///
/// # Safety
/// `run_dir` must be a NUL-terminated string and `out` valid for one pointer
/// write.
#[no_mangle]
pub unsafe extern "C" fn tp_recommender_open(run_dir: *const c_char, out: *mut *mut TpRecommender) -> TpStatus {
    guard(|| {
        if out.is_null() {
            return Err(fail(TpStatus::NullPointer, "out is null"));
        }
        // SAFETY: forwarded caller contract.
        let dir =
            unsafe { path_arg(run_dir, "run_dir") }?.ok_or_else(|| fail(TpStatus::NullPointer, "run_dir is null"))?;
        let inner = lift(Recommender::open(&dir))?;
        // SAFETY: checked non-null; writable per the caller contract.
        unsafe { *out = Box::into_raw(Box::new(TpRecommender { inner })) };
        Ok(())
    })
}

/// Ranks up to `min(top_k, capacity)` hotspots for a user at hour `t_of_day`
/// and writes them to `out`. `*written` receives the count.
///
/// # Safety
/// `handle` must come from [`tp_recommender_open`]; `out` must be valid for
/// `capacity` writes; `written` must be valid for one write.
#[no_mangle]
pub unsafe extern "C" fn tp_recommend(
    handle: *const TpRecommender,
    lat: f64,
    lon: f64,
    t_of_day: f64,
    top_k: usize,
    out: *mut TpRankedHotspot,
    capacity: usize,
    written: *mut usize,
) -> TpStatus {
    guard(|| {
        if handle.is_null() || written.is_null() || (out.is_null() && capacity > 0) {
            return Err(fail(TpStatus::NullPointer, "null handle or output pointer"));
        }
        if top_k == 0 {
            return Err(fail(TpStatus::InvalidArgument, "top_k must be at least 1"));
        }
        // SAFETY: non-null handle produced by tp_recommender_open.
        let rec = unsafe { &(*handle).inner };
        let user = lift(GeoPoint::new(lat, lon))?;
        let ranked = lift(rec.recommend(user, t_of_day, top_k.min(capacity)))?;
        for (i, r) in ranked.iter().enumerate() {
            let row = TpRankedHotspot {
                rank: r.rank as u32,
                hotspot: r.hotspot as u32,
                lat: r.lat,
                lon: r.lon,
                q_value: r.q_value,
                distance_km: r.distance_km,
                congestion: r.congestion,
            };
            // SAFETY: i < ranked.len() <= capacity, within the caller's buffer.
            unsafe { out.add(i).write(row) };
        }
        // SAFETY: checked non-null.
        unsafe { *written = ranked.len() };
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `handle` must be null or come from [`tp_recommender_open`] and not have
/// been freed.
#[no_mangle]
pub unsafe extern "C" fn tp_recommender_free(handle: *mut TpRecommender) {
    if !handle.is_null() {
        // SAFETY: ownership returns to Rust exactly once per the contract.
        drop(unsafe { Box::from_raw(handle) });
    }
}
