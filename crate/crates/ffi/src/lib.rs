//! C ABI over `harmony-core`.
//!
//! Objects are opaque handles created by `*_load` and released with the
//! matching `*_free`. Every fallible call returns an [`HrStatus`]; on failure
//! [`hr_last_error`] describes the error for the calling thread. Images cross
//! the boundary as row-major interleaved `float` buffers in `[0, 1]`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use harmony_core::checkpoint::Checkpoint;
use harmony_core::diffcore::{SamplerMode, SamplerParams};
use harmony_core::envlight::{self, CropSpec, EnvMap};
use harmony_core::harmoneval::{self, harmonize_with};
use harmony_core::image::Image;
use harmony_core::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HrStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    ShapeMismatch = 5,
    StageMismatch = 6,
    NonFinite = 7,
    Panic = 8,
}

/// Opaque environment map.
pub struct HrEnvMap(EnvMap);

/// Opaque harmonization model (a loaded checkpoint).
pub struct HrModel(Checkpoint);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> HrStatus {
    match e {
        Error::Io { .. } | Error::Image { .. } => HrStatus::Io,
        Error::Format { .. } | Error::Checkpoint(_) => HrStatus::Format,
        Error::ShapeMismatch { .. } => HrStatus::ShapeMismatch,
        Error::StageMismatch(_) => HrStatus::StageMismatch,
        Error::NonFinite | Error::NonFiniteLoss { .. } => HrStatus::NonFinite,
        _ => HrStatus::InvalidArgument,
    }
}

struct Fail(HrStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> HrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HrStatus::Ok,
        Ok(Err(Fail(s, msg))) => {
            set_error(msg);
            s
        }
        Err(_) => {
            set_error("internal panic".into());
            HrStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(HrStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(HrStatus::InvalidArgument, "path is not UTF-8".into()))
}

unsafe fn image_arg(data: *const f32, width: u32, height: u32, channels: u32, what: &str) -> Result<Image, Fail> {
    if data.is_null() {
        return Err(null(what));
    }
    let len = width as usize * height as usize * channels as usize;
    Ok(Image::new(width as usize, height as usize, channels as usize, std::slice::from_raw_parts(data, len).to_vec())?)
}

unsafe fn write_out<T>(out: *mut T, v: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    out.write(v);
    Ok(())
}

/// Message of the calling thread's last failure, or null. Valid until the
/// next failing call on the same thread.
#[no_mangle]
pub extern "C" fn hr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Reads an `ENVM` file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn hr_envmap_load(path: *const c_char, out: *mut *mut HrEnvMap) -> HrStatus {
    guard(|| {
        let env = envlight::read_envmap(path_arg(path)?)?;
        write_out(out, Box::into_raw(Box::new(HrEnvMap(env))))
    })
}

/// # Safety
/// `env` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn hr_envmap_free(env: *mut HrEnvMap) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

/// # Safety
/// `env` must be a live handle; `height` and `width` writable.
#[no_mangle]
pub unsafe extern "C" fn hr_envmap_size(env: *const HrEnvMap, height: *mut u32, width: *mut u32) -> HrStatus {
    guard(|| {
        let env = env.as_ref().ok_or_else(|| null("env"))?;
        write_out(height, env.0.height() as u32)?;
        write_out(width, env.0.width() as u32)
    })
}

/// Diffuse irradiance for the unit normal `(nx, ny, nz)`; writes 3 floats.
///
/// # Safety
/// `env` must be a live handle; `rgb` must hold 3 floats.
#[no_mangle]
pub unsafe extern "C" fn hr_envmap_irradiance(
    env: *const HrEnvMap,
    nx: f64,
    ny: f64,
    nz: f64,
    rgb: *mut f32,
) -> HrStatus {
    guard(|| {
        let env = env.as_ref().ok_or_else(|| null("env"))?;
        if rgb.is_null() {
            return Err(null("rgb"));
        }
        let e = envlight::irradiance(&env.0, [nx, ny, nz])?;
        for (k, v) in e.iter().enumerate() {
            *rgb.add(k) = *v as f32;
        }
        Ok(())
    })
}

/// Rotates about the vertical axis; returns a new handle.
///
/// # Safety
/// `env` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hr_envmap_rotate(env: *const HrEnvMap, yaw: f64, out: *mut *mut HrEnvMap) -> HrStatus {
    guard(|| {
        let env = env.as_ref().ok_or_else(|| null("env"))?;
        write_out(out, Box::into_raw(Box::new(HrEnvMap(envlight::rotate_envmap(&env.0, yaw)))))
    })
}

/// Perspective background crop. Writes `width * height * 3` floats: linear
/// radiance, or tonemapped LDR when `ldr` is non-zero.
///
/// # Safety
/// `env` must be a live handle; `rgb` must hold `width * height * 3` floats.
#[no_mangle]
pub unsafe extern "C" fn hr_envmap_project(
    env: *const HrEnvMap,
    fov_deg: f64,
    yaw: f64,
    pitch: f64,
    width: u32,
    height: u32,
    ldr: i32,
    rgb: *mut f32,
) -> HrStatus {
    guard(|| {
        let env = env.as_ref().ok_or_else(|| null("env"))?;
        if rgb.is_null() {
            return Err(null("rgb"));
        }
        let crop = CropSpec::new(fov_deg, yaw, pitch, width as usize, height as usize)?;
        let mut img = envlight::project_to_background(&env.0, &crop);
        if ldr != 0 {
            img = envlight::tonemap_ldr(&img);
        }
        ptr::copy_nonoverlapping(img.data.as_ptr(), rgb, img.data.len());
        Ok(())
    })
}

/// Loads a checkpoint usable for harmonization.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hr_model_load(path: *const c_char, out: *mut *mut HrModel) -> HrStatus {
    guard(|| {
        let ckpt = Checkpoint::load(path_arg(path)?)?;
        write_out(out, Box::into_raw(Box::new(HrModel(ckpt))))
    })
}

/// # Safety
/// `model` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn hr_model_free(model: *mut HrModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Side length `S` the model was trained at.
///
/// # Safety
/// `model` must be a live handle; `size` writable.
#[no_mangle]
pub unsafe extern "C" fn hr_model_image_size(model: *const HrModel, size: *mut u32) -> HrStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        write_out(size, m.0.model.image_size() as u32)
    })
}

/// Composites `fg` (RGB) with `mask` (one channel) over `bg` (RGB), all
/// `width x height`, and harmonizes it with deterministic sampling. Writes
/// `width * height * 3` floats to `out`.
///
/// # Safety
/// All buffers must hold the stated number of floats; `model` must be live.
#[no_mangle]
pub unsafe extern "C" fn hr_harmonize(
    model: *const HrModel,
    fg: *const f32,
    mask: *const f32,
    bg: *const f32,
    width: u32,
    height: u32,
    steps: u32,
    seed: u64,
    out: *mut f32,
) -> HrStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let fg = image_arg(fg, width, height, 3, "fg")?;
        let mask = image_arg(mask, width, height, 1, "mask")?;
        let bg = image_arg(bg, width, height, 3, "bg")?;
        let params = SamplerParams { mode: SamplerMode::Ddim, steps: steps as usize, seed };
        let img = harmonize_with(&m.0, &fg, &mask, &bg, &params)?;
        ptr::copy_nonoverlapping(img.data.as_ptr(), out, img.data.len());
        Ok(())
    })
}

/// PSNR in dB of two equally sized images (peak 1, capped at 99).
///
/// # Safety
/// `a` and `b` must hold `width * height * channels` floats; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hr_psnr(
    a: *const f32,
    b: *const f32,
    width: u32,
    height: u32,
    channels: u32,
    out: *mut f64,
) -> HrStatus {
    guard(|| {
        let (a, b) = (image_arg(a, width, height, channels, "a")?, image_arg(b, width, height, channels, "b")?);
        write_out(out, harmoneval::psnr(&a, &b)?)
    })
}

/// Mean SSIM (11x11 Gaussian window) of two equally sized images.
///
/// # Safety
/// `a` and `b` must hold `width * height * channels` floats; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn hr_ssim(
    a: *const f32,
    b: *const f32,
    width: u32,
    height: u32,
    channels: u32,
    out: *mut f64,
) -> HrStatus {
    guard(|| {
        let (a, b) = (image_arg(a, width, height, channels, "a")?, image_arg(b, width, height, channels, "b")?);
        write_out(out, harmoneval::ssim(&a, &b)?)
    })
}
