//! C ABI for embedding the reconstruction pipeline. Handles are opaque;
//! every call returns a status code and the last failure message is
//! retrievable per thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use monorecon::checkpoint;
use monorecon::encoder::{encode, FeatureGrid};
use monorecon::geometry::SE3Pose;
use monorecon::losses::{ModelState, Sequence};
use monorecon::recon;
use monorecon::render::RenderConfig;

/// Status code returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MrStatus {
    MrOk = 0,
    /// A pointer argument was null or a path was not valid UTF-8.
    MrBadArgument = 1,
    /// File missing, unreadable or malformed.
    MrIoError = 2,
    /// Numerical failure while rendering.
    MrComputeError = 3,
    /// Unexpected internal failure.
    MrInternal = 4,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg).unwrap_or_else(|_| CString::new("invalid error text").unwrap());
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

/// Message for the most recent failure on this thread, or null. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| {
        e.borrow()
            .as_ref()
            .map_or(ptr::null(), |c| c.as_ptr())
    })
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn mr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// A trained model bound to its conditioning frame: ready to render views.
pub struct MrModel {
    state: ModelState,
    seq: Sequence,
    grid: FeatureGrid,
    rcfg: RenderConfig,
    seed: u64,
}

unsafe fn cstr_path<'a>(p: *const c_char) -> Option<&'a Path> {
    if p.is_null() {
        return None;
    }
    CStr::from_ptr(p).to_str().ok().map(Path::new)
}

fn guard<F: FnOnce() -> MrStatus>(f: F) -> MrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => {
            set_error("internal panic".into());
            MrStatus::MrInternal
        }
    }
}

/// Load a checkpoint plus the dataset holding its conditioning frame.
/// On success writes an owned handle to `out`; release with `mr_model_free`.
///
/// # Safety
/// `ckpt_path` and `data_dir` must be valid NUL-terminated strings and `out`
/// a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mr_model_load(
    ckpt_path: *const c_char,
    data_dir: *const c_char,
    out: *mut *mut MrModel,
) -> MrStatus {
    guard(|| {
        let (Some(ck), Some(data)) = (cstr_path(ckpt_path), cstr_path(data_dir)) else {
            set_error("null or non-UTF-8 path".into());
            return MrStatus::MrBadArgument;
        };
        if out.is_null() {
            set_error("null output handle".into());
            return MrStatus::MrBadArgument;
        }
        let loaded = (|| -> monorecon::Result<MrModel> {
            let (state, tcfg) = checkpoint::load(ck)?;
            let seq = Sequence::load(data)?;
            let grid = encode(&state.encoder, &seq.images[0], &seq.intrinsics)?;
            Ok(MrModel {
                rcfg: tcfg.render_config(),
                seed: tcfg.seed,
                state,
                seq,
                grid,
            })
        })();
        match loaded {
            Ok(m) => {
                *out = Box::into_raw(Box::new(m));
                MrStatus::MrOk
            }
            Err(e) => {
                set_error(e.to_string());
                MrStatus::MrIoError
            }
        }
    })
}

/// Release a handle from `mr_model_load`. Null is a no-op.
///
/// # Safety
/// `model` must be a live handle from `mr_model_load` or null; it must not
/// be used again afterwards.
#[no_mangle]
pub unsafe extern "C" fn mr_model_free(model: *mut MrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Image width and height in pixels.
///
/// # Safety
/// All pointers must be valid; `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mr_image_size(
    model: *const MrModel,
    width: *mut usize,
    height: *mut usize,
) -> MrStatus {
    if model.is_null() || width.is_null() || height.is_null() {
        set_error("null argument".into());
        return MrStatus::MrBadArgument;
    }
    let m = &*model;
    *width = m.seq.intrinsics.width;
    *height = m.seq.intrinsics.height;
    MrStatus::MrOk
}

fn render_pose(m: &MrModel, forward_m: f64, yaw_deg: f64) -> SE3Pose {
    m.seq.poses[0].offset_forward_yaw(forward_m, yaw_deg.to_radians())
}

/// Render a depth map from a pose relative to the conditioning frame:
/// `forward_m` meters along the optical axis, then `yaw_deg` degrees of yaw.
/// Writes width*height doubles (row-major, meters; 0 marks rays that hit
/// nothing) into `out`, which must hold at least `out_len` doubles.
///
/// # Safety
/// `model` must be a live handle; `out` must point to `out_len` writable
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn mr_render_depth(
    model: *const MrModel,
    forward_m: f64,
    yaw_deg: f64,
    out: *mut f64,
    out_len: usize,
) -> MrStatus {
    guard(|| {
        if model.is_null() || out.is_null() {
            set_error("null argument".into());
            return MrStatus::MrBadArgument;
        }
        let m = &*model;
        let k = &m.seq.intrinsics;
        let need = k.width * k.height;
        if out_len < need {
            set_error(format!("buffer holds {out_len} doubles, need {need}"));
            return MrStatus::MrBadArgument;
        }
        let pose = render_pose(m, forward_m, yaw_deg);
        match recon::render_depth_map(&m.state, &m.grid, &pose, k, &m.rcfg, m.seed) {
            Ok(depth) => {
                let dst = std::slice::from_raw_parts_mut(out, need);
                dst.copy_from_slice(&depth.data);
                MrStatus::MrOk
            }
            Err(e) => {
                set_error(e.to_string());
                MrStatus::MrComputeError
            }
        }
    })
}

/// Render an RGB image the same way. Writes width*height*3 doubles in [0,1],
/// row-major, channel-interleaved.
///
/// # Safety
/// Same contract as `mr_render_depth`.
#[no_mangle]
pub unsafe extern "C" fn mr_render_image(
    model: *const MrModel,
    forward_m: f64,
    yaw_deg: f64,
    out: *mut f64,
    out_len: usize,
) -> MrStatus {
    guard(|| {
        if model.is_null() || out.is_null() {
            set_error("null argument".into());
            return MrStatus::MrBadArgument;
        }
        let m = &*model;
        let k = &m.seq.intrinsics;
        let need = k.width * k.height * 3;
        if out_len < need {
            set_error(format!("buffer holds {out_len} doubles, need {need}"));
            return MrStatus::MrBadArgument;
        }
        let pose = render_pose(m, forward_m, yaw_deg);
        match recon::render_image(&m.state, &m.grid, &pose, k, &m.rcfg, m.seed) {
            Ok(img) => {
                let dst = std::slice::from_raw_parts_mut(out, need);
                dst.copy_from_slice(&img.data);
                MrStatus::MrOk
            }
            Err(e) => {
                set_error(e.to_string());
                MrStatus::MrComputeError
            }
        }
    })
}
