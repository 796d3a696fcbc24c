//! C ABI for the capture library: opaque handles over checkpoints and
//! datasets, status codes mirroring the CLI exit contract, and a
//! thread-local last-error message.
//!
//! Conventions: functions return [`McapStatus`]; on any non-OK status the
//! message from [`mcap_last_error`] describes the failure and stays valid
//! on the calling thread until its next failing call. Output parameters are
//! written only on MCAP_STATUS_OK. Handles are freed exactly once with
//! their matching `_free` function; passing NULL to a `_free` is a no-op.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use metacap::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use metacap::dataset::{validate_dataset, CaptureDataset};
use metacap::evalgeo::extract_mesh;
use metacap::renderer::{render_image, RenderConfig};
use metacap::template::pose_template;
use metacap::{Error, Result};

/// Status codes; nonzero values match the CLI exit-code contract.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum McapStatus {
    Ok = 0,
    /// Bad arguments: null pointers, out-of-range indices, malformed paths.
    Usage = 2,
    /// Invalid data: unreadable files, corrupt checkpoints, bad datasets.
    Data = 3,
    /// Numerical failure inside the library.
    Numerical = 4,
}

/// Opaque handle over a loaded checkpoint (field config, mode, weights).
pub struct McapCheckpoint {
    inner: Checkpoint,
}

/// Opaque handle over an opened capture dataset.
pub struct McapDataset {
    inner: CaptureDataset,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let clean: String = msg.chars().filter(|&c| c != '\0').collect();
    LAST_ERROR.with(|e| {
        *e.borrow_mut() = CString::new(clean).unwrap_or_default();
    });
}

fn status_of(e: &Error) -> McapStatus {
    match e.exit_code() {
        2 => McapStatus::Usage,
        3 => McapStatus::Data,
        _ => McapStatus::Numerical,
    }
}

/// Runs a fallible body, catching panics so unwinding never crosses the
/// language boundary.
fn guard(f: impl FnOnce() -> Result<()>) -> McapStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => McapStatus::Ok,
        Ok(Err(e)) => {
            set_last_error(&e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_last_error("internal panic");
            McapStatus::Numerical
        }
    }
}

fn usage(msg: &str) -> Error {
    Error::usage(msg)
}

/// # Safety
/// `ptr` must be a valid NUL-terminated string.
unsafe fn path_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a Path> {
    if ptr.is_null() {
        return Err(usage(&format!("{what} is NULL")));
    }
    let s = unsafe { CStr::from_ptr(ptr) }
        .to_str()
        .map_err(|_| usage(&format!("{what} is not valid UTF-8")))?;
    Ok(Path::new(s))
}

fn ckpt_arg<'a>(ptr: *const McapCheckpoint, what: &str) -> Result<&'a Checkpoint> {
    if ptr.is_null() {
        return Err(usage(&format!("{what} is NULL")));
    }
    Ok(unsafe { &(*ptr).inner })
}

fn ds_arg<'a>(ptr: *const McapDataset, what: &str) -> Result<&'a CaptureDataset> {
    if ptr.is_null() {
        return Err(usage(&format!("{what} is NULL")));
    }
    Ok(unsafe { &(*ptr).inner })
}

/// Returns the calling thread's last error message. The pointer is valid
/// until the next failing call on this thread; never freed by the caller.
#[no_mangle]
pub extern "C" fn mcap_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a checkpoint file into a new handle.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mcap_checkpoint_load(
    path: *const c_char,
    out: *mut *mut McapCheckpoint,
) -> McapStatus {
    guard(|| {
        if out.is_null() {
            return Err(usage("out is NULL"));
        }
        let path = unsafe { path_arg(path, "path") }?;
        let inner = load_checkpoint(path)?;
        unsafe { *out = Box::into_raw(Box::new(McapCheckpoint { inner })) };
        Ok(())
    })
}

/// Writes a checkpoint handle to a file.
///
/// # Safety
/// `ckpt` must be a live handle; `path` a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mcap_checkpoint_save(
    ckpt: *const McapCheckpoint,
    path: *const c_char,
) -> McapStatus {
    guard(|| {
        let c = ckpt_arg(ckpt, "ckpt")?;
        let path = unsafe { path_arg(path, "path") }?;
        save_checkpoint(path, &c.field, c.mode, &c.params)
    })
}

/// Frees a checkpoint handle; NULL is a no-op.
///
/// # Safety
/// `ckpt` must be NULL or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn mcap_checkpoint_free(ckpt: *mut McapCheckpoint) {
    if !ckpt.is_null() {
        drop(unsafe { Box::from_raw(ckpt) });
    }
}

/// Number of parameters in the checkpoint; 0 for NULL.
///
/// # Safety
/// `ckpt` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mcap_checkpoint_param_count(ckpt: *const McapCheckpoint) -> usize {
    if ckpt.is_null() {
        return 0;
    }
    unsafe { &*ckpt }.inner.params.values.len()
}

/// Interpolates two checkpoints in weight space: t = 0 gives `a`, t = 1
/// gives `b`. Layouts, field configs, and modes must match.
///
/// # Safety
/// `a` and `b` must be live handles and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mcap_checkpoint_lerp(
    a: *const McapCheckpoint,
    b: *const McapCheckpoint,
    t: f64,
    out: *mut *mut McapCheckpoint,
) -> McapStatus {
    guard(|| {
        if out.is_null() {
            return Err(usage("out is NULL"));
        }
        let a = ckpt_arg(a, "a")?;
        let b = ckpt_arg(b, "b")?;
        if a.field != b.field {
            return Err(Error::data("checkpoints have different field configurations"));
        }
        if a.mode != b.mode {
            return Err(Error::data("checkpoints use different canonicalization modes"));
        }
        let params = metacap::adapt::lerp_weights(&a.params, &b.params, t)?;
        let inner = Checkpoint {
            field: a.field.clone(),
            mode: a.mode,
            params,
        };
        unsafe { *out = Box::into_raw(Box::new(McapCheckpoint { inner })) };
        Ok(())
    })
}

/// Opens and validates a dataset directory into a new handle.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mcap_dataset_open(
    path: *const c_char,
    out: *mut *mut McapDataset,
) -> McapStatus {
    guard(|| {
        if out.is_null() {
            return Err(usage("out is NULL"));
        }
        let path = unsafe { path_arg(path, "path") }?;
        let inner = CaptureDataset::open(path)?;
        unsafe { *out = Box::into_raw(Box::new(McapDataset { inner })) };
        Ok(())
    })
}

/// Frees a dataset handle; NULL is a no-op.
///
/// # Safety
/// `ds` must be NULL or a handle not freed before.
#[no_mangle]
pub unsafe extern "C" fn mcap_dataset_free(ds: *mut McapDataset) {
    if !ds.is_null() {
        drop(unsafe { Box::from_raw(ds) });
    }
}

/// Number of cameras in the dataset; 0 for NULL.
///
/// # Safety
/// `ds` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mcap_dataset_camera_count(ds: *const McapDataset) -> usize {
    if ds.is_null() {
        return 0;
    }
    unsafe { &*ds }.inner.n_cameras()
}

/// Number of frames in the dataset; 0 for NULL.
///
/// # Safety
/// `ds` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mcap_dataset_frame_count(ds: *const McapDataset) -> usize {
    if ds.is_null() {
        return 0;
    }
    unsafe { &*ds }.inner.n_frames()
}

/// Writes the image dimensions of one camera.
///
/// # Safety
/// `ds` must be a live handle; `width` and `height` valid pointers.
#[no_mangle]
pub unsafe extern "C" fn mcap_dataset_camera_dims(
    ds: *const McapDataset,
    camera: usize,
    width: *mut u32,
    height: *mut u32,
) -> McapStatus {
    guard(|| {
        let d = ds_arg(ds, "ds")?;
        if width.is_null() || height.is_null() {
            return Err(usage("width/height is NULL"));
        }
        let cam = d
            .cameras
            .get(camera)
            .ok_or_else(|| usage(&format!("camera {camera} out of range")))?;
        unsafe {
            *width = cam.width;
            *height = cam.height;
        }
        Ok(())
    })
}

/// Checks every dataset invariant. `report` is always written: NULL when
/// the dataset is clean or unreadable, else a newline-separated violation
/// report (free with [`mcap_string_free`]) alongside a data status.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `report` a valid
/// pointer.
#[no_mangle]
pub unsafe extern "C" fn mcap_validate(
    path: *const c_char,
    report: *mut *mut c_char,
) -> McapStatus {
    guard(|| {
        if report.is_null() {
            return Err(usage("report is NULL"));
        }
        unsafe { *report = std::ptr::null_mut() };
        let path = unsafe { path_arg(path, "path") }?;
        let violations = validate_dataset(path)?;
        if violations.is_empty() {
            Ok(())
        } else {
            let joined: String = violations.join("\n").chars().filter(|&c| c != '\0').collect();
            let cs = CString::new(joined).unwrap_or_default();
            unsafe { *report = cs.into_raw() };
            Err(Error::data(format!("{} violation(s)", violations.len())))
        }
    })
}

/// Frees a string returned by this library; NULL is a no-op.
///
/// # Safety
/// `s` must be NULL or a string returned by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn mcap_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}

/// Renders one dataset view from a checkpoint. `rgb` receives
/// width*height*3 doubles in row-major RGB order; `mask` (optional, may be
/// NULL) receives width*height doubles. Query sizes with
/// [`mcap_dataset_camera_dims`]. `samples_per_ray` 0 uses the default.
///
/// # Safety
/// `ckpt` and `ds` must be live handles; `rgb` (and `mask` if non-NULL)
/// must point to buffers of the documented sizes.
#[no_mangle]
pub unsafe extern "C" fn mcap_render(
    ckpt: *const McapCheckpoint,
    ds: *const McapDataset,
    frame: usize,
    camera: usize,
    samples_per_ray: usize,
    seed: u64,
    rgb: *mut f64,
    mask: *mut f64,
) -> McapStatus {
    guard(|| {
        let c = ckpt_arg(ckpt, "ckpt")?;
        let d = ds_arg(ds, "ds")?;
        if rgb.is_null() {
            return Err(usage("rgb is NULL"));
        }
        let cam = d
            .cameras
            .get(camera)
            .ok_or_else(|| usage(&format!("camera {camera} out of range")))?;
        let prog = metacap::field::FieldProgram::new(c.field.clone())?;
        let posed = pose_template(&d.template, d.pose(frame)?)?;
        let mut cfg = RenderConfig {
            mode: c.mode,
            seed,
            ..RenderConfig::default()
        };
        if samples_per_ray > 0 {
            cfg.samples_per_ray = samples_per_ray;
        }
        let (img, msk) = render_image(&prog, &c.params, cam, &posed, &cfg)?;
        let n = (cam.width * cam.height) as usize;
        let rgb_out = unsafe { std::slice::from_raw_parts_mut(rgb, n * 3) };
        for (i, px) in img.pixels.iter().enumerate() {
            rgb_out[3 * i] = px[0];
            rgb_out[3 * i + 1] = px[1];
            rgb_out[3 * i + 2] = px[2];
        }
        if !mask.is_null() {
            let mask_out = unsafe { std::slice::from_raw_parts_mut(mask, n) };
            mask_out.copy_from_slice(&msk.values);
        }
        Ok(())
    })
}

/// Extracts the zero surface to an OBJ file. With `ds` non-NULL and
/// `frame` >= 0 the surface is posed into that frame; otherwise it stays
/// in canonical space. An empty surface still writes a (vertex-free) file
/// and returns OK.
///
/// # Safety
/// `ckpt` must be a live handle; `ds` NULL or a live handle; `out_path` a
/// valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn mcap_extract(
    ckpt: *const McapCheckpoint,
    ds: *const McapDataset,
    frame: i64,
    resolution: usize,
    out_path: *const c_char,
) -> McapStatus {
    guard(|| {
        let c = ckpt_arg(ckpt, "ckpt")?;
        let path = unsafe { path_arg(out_path, "out_path") }?;
        let prog = metacap::field::FieldProgram::new(c.field.clone())?;
        let posed_storage;
        let dataset_storage;
        let warp = if frame >= 0 {
            if ds.is_null() {
                return Err(usage("posed extraction needs a dataset for the template"));
            }
            dataset_storage = ds_arg(ds, "ds")?;
            posed_storage = pose_template(
                &dataset_storage.template,
                dataset_storage.pose(frame as usize)?,
            )?;
            Some((&dataset_storage.template, &posed_storage, c.mode))
        } else {
            None
        };
        let mesh = extract_mesh(&prog, &c.params, resolution, warp)?;
        mesh.write_obj(path)
    })
}
