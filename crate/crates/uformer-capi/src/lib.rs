//! C ABI for the uformer image restoration library.
//!
//! Models are opaque handles created from a configuration string (the same
//! `key = value` format the CLI reads, or `builtin:<name>`), from a seed, or
//! loaded from a checkpoint file. Image buffers are row-major
//! `[channels, height, width]` f32 with values in [0, 1].
//!
//! Every function returns a [`UformerStatus`]; on failure
//! [`uformer_last_error`] yields a message valid until the next call on the
//! same thread. The generated header lives at `include/uformer.h`.

use libc::{c_char, size_t};
use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use uformer::error::Error;
use uformer::io;
use uformer::metrics::{tiled_inference, Image};
use uformer::model::{build, restore, UformerConfig, UformerParams};
use uformer::runconfig;
use uformer::tensor::Tensor;

/// Result of every C API call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UformerStatus {
    Ok = 0,
    /// Runtime failure (training/verification class errors).
    RuntimeError = 1,
    /// Bad configuration, shape, or file content.
    ConfigError = 2,
    /// A required pointer argument was null.
    NullArgument = 3,
    /// A panic was caught at the boundary.
    Panic = 4,
}

/// Opaque model handle (f32 weights).
pub struct UformerModel {
    params: UformerParams<Tensor<f32>>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::new("").unwrap());
}

fn set_error(msg: &str) {
    let sanitized = msg.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_of(err: &Error) -> UformerStatus {
    match err.exit_code() {
        1 => UformerStatus::RuntimeError,
        _ => UformerStatus::ConfigError,
    }
}

fn guard(body: impl FnOnce() -> Result<(), (UformerStatus, String)>) -> UformerStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => UformerStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("panic inside uformer");
            UformerStatus::Panic
        }
    }
}

fn fail<T>(status: UformerStatus, msg: impl Into<String>) -> Result<T, (UformerStatus, String)> {
    Err((status, msg.into()))
}

fn lift<T>(r: Result<T, Error>) -> Result<T, (UformerStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

unsafe fn str_arg<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, (UformerStatus, String)> {
    if ptr.is_null() {
        return fail(UformerStatus::NullArgument, format!("{name} is null"));
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        (
            UformerStatus::ConfigError,
            format!("{name} is not valid UTF-8"),
        )
    })
}

fn parse_config(text: &str) -> Result<UformerConfig, (UformerStatus, String)> {
    if let Some(name) = text.strip_prefix("builtin:") {
        return match runconfig::builtin(name) {
            Some(rc) => Ok(rc.model),
            None => fail(
                UformerStatus::ConfigError,
                format!("unknown builtin config '{name}'"),
            ),
        };
    }
    lift(runconfig::parse(text).map(|rc| rc.model))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn uformer_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the most recent failure on this thread. Valid until the next
/// API call from the same thread; never null.
#[no_mangle]
pub extern "C" fn uformer_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Create a freshly initialized model from a configuration string
/// (`key = value` lines or `builtin:<name>`) and a seed.
///
/// # Safety
/// `config` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn uformer_model_create(
    config: *const c_char,
    seed: u64,
    out: *mut *mut UformerModel,
) -> UformerStatus {
    guard(|| {
        if out.is_null() {
            return fail(UformerStatus::NullArgument, "out is null");
        }
        let text = str_arg(config, "config")?;
        let cfg = parse_config(text)?;
        let params = lift(build::<f32>(&cfg, seed))?;
        *out = Box::into_raw(Box::new(UformerModel { params }));
        Ok(())
    })
}

/// Load a model from a checkpoint file written by this library or the CLI.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn uformer_model_load(
    path: *const c_char,
    out: *mut *mut UformerModel,
) -> UformerStatus {
    guard(|| {
        if out.is_null() {
            return fail(UformerStatus::NullArgument, "out is null");
        }
        let path = str_arg(path, "path")?;
        let mut ck = lift(io::load_checkpoint::<f32>(Path::new(path)))?;
        let params = lift(io::params_from_tensors(&ck.config, &mut ck.tensors))?;
        *out = Box::into_raw(Box::new(UformerModel { params }));
        Ok(())
    })
}

/// Write the model as a checkpoint file.
///
/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn uformer_model_save(
    model: *const UformerModel,
    path: *const c_char,
) -> UformerStatus {
    guard(|| {
        let Some(model) = model.as_ref() else {
            return fail(UformerStatus::NullArgument, "model is null");
        };
        let path = str_arg(path, "path")?;
        lift(io::save_checkpoint(
            Path::new(path),
            &io::Checkpoint {
                config: model.params.config.clone(),
                step: 0,
                tensors: io::params_to_tensors(&model.params),
            },
        ))?;
        Ok(())
    })
}

/// Release a model handle. Null is ignored.
///
/// # Safety
/// `model` must have come from this library and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn uformer_model_free(model: *mut UformerModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Total learnable scalar count (0 for a null handle).
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn uformer_model_param_count(model: *const UformerModel) -> u64 {
    model
        .as_ref()
        .map(|m| m.params.param_count() as u64)
        .unwrap_or(0)
}

/// Smallest admissible input extent for this model (0 for null).
///
/// # Safety
/// `model` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn uformer_model_min_extent(model: *const UformerModel) -> u64 {
    model
        .as_ref()
        .map(|m| m.params.config.min_extent() as u64)
        .unwrap_or(0)
}

unsafe fn image_from_raw(
    input: *const f32,
    channels: size_t,
    height: size_t,
    width: size_t,
) -> Result<Tensor<f32>, (UformerStatus, String)> {
    if input.is_null() {
        return fail(UformerStatus::NullArgument, "input is null");
    }
    let len = channels * height * width;
    let slice = std::slice::from_raw_parts(input, len);
    lift(Tensor::new(vec![channels, height, width], slice.to_vec()))
}

/// Restore one image in a single forward pass. `input` and `output` are
/// row-major `[channels, height, width]` f32 buffers of identical extents.
///
/// # Safety
/// Buffers must hold `channels * height * width` readable/writable floats.
#[no_mangle]
pub unsafe extern "C" fn uformer_model_restore(
    model: *const UformerModel,
    input: *const f32,
    channels: size_t,
    height: size_t,
    width: size_t,
    output: *mut f32,
) -> UformerStatus {
    guard(|| {
        let Some(model) = model.as_ref() else {
            return fail(UformerStatus::NullArgument, "model is null");
        };
        if output.is_null() {
            return fail(UformerStatus::NullArgument, "output is null");
        }
        let img = image_from_raw(input, channels, height, width)?;
        let restored = lift(restore(&model.params, &img))?;
        let out = std::slice::from_raw_parts_mut(output, channels * height * width);
        out.copy_from_slice(restored.data());
        Ok(())
    })
}

/// Restore one image through overlap-tiled inference (values clamped to
/// [0, 1] like the CLI path).
///
/// # Safety
/// Buffers must hold `channels * height * width` readable/writable floats.
#[no_mangle]
pub unsafe extern "C" fn uformer_model_restore_tiled(
    model: *const UformerModel,
    input: *const f32,
    channels: size_t,
    height: size_t,
    width: size_t,
    tile: size_t,
    overlap: size_t,
    output: *mut f32,
) -> UformerStatus {
    guard(|| {
        let Some(model) = model.as_ref() else {
            return fail(UformerStatus::NullArgument, "model is null");
        };
        if output.is_null() {
            return fail(UformerStatus::NullArgument, "output is null");
        }
        let img = image_from_raw(input, channels, height, width)?;
        let image = lift(Image::from_tensor(&img))?;
        let restored = lift(tiled_inference(&model.params, &image, tile, overlap))?;
        let tensor = restored.to_tensor::<f32>();
        let out = std::slice::from_raw_parts_mut(output, channels * height * width);
        out.copy_from_slice(tensor.data());
        Ok(())
    })
}

/// Analytic learnable-parameter total for a configuration string.
///
/// # Safety
/// `config` must be NUL-terminated; `out_params` valid.
#[no_mangle]
pub unsafe extern "C" fn uformer_count_params(
    config: *const c_char,
    out_params: *mut u64,
) -> UformerStatus {
    guard(|| {
        if out_params.is_null() {
            return fail(UformerStatus::NullArgument, "out_params is null");
        }
        let cfg = parse_config(str_arg(config, "config")?)?;
        let report = lift(uformer::accounting::count_params(&cfg))?;
        *out_params = report.total_params;
        Ok(())
    })
}

/// Analytic multiply-accumulate total at the given input resolution.
///
/// # Safety
/// `config` must be NUL-terminated; `out_macs` valid.
#[no_mangle]
pub unsafe extern "C" fn uformer_count_macs(
    config: *const c_char,
    height: size_t,
    width: size_t,
    out_macs: *mut u64,
) -> UformerStatus {
    guard(|| {
        if out_macs.is_null() {
            return fail(UformerStatus::NullArgument, "out_macs is null");
        }
        let cfg = parse_config(str_arg(config, "config")?)?;
        let report = lift(uformer::accounting::count_macs(&cfg, height, width))?;
        *out_macs = report.total_macs;
        Ok(())
    })
}

/// PSNR between two equally sized buffers (+inf encoded as INFINITY).
///
/// # Safety
/// Both buffers must hold `count` readable floats; `out_db` valid.
#[no_mangle]
pub unsafe extern "C" fn uformer_psnr(
    a: *const f32,
    b: *const f32,
    count: size_t,
    peak: f64,
    out_db: *mut f64,
) -> UformerStatus {
    guard(|| {
        if a.is_null() || b.is_null() || out_db.is_null() {
            return fail(UformerStatus::NullArgument, "null buffer");
        }
        if count == 0 {
            return fail(UformerStatus::ConfigError, "count is zero");
        }
        let xa = std::slice::from_raw_parts(a, count);
        let xb = std::slice::from_raw_parts(b, count);
        let mse: f64 = xa
            .iter()
            .zip(xb)
            .map(|(&x, &y)| {
                let d = x as f64 - y as f64;
                d * d
            })
            .sum::<f64>()
            / count as f64;
        *out_db = if mse == 0.0 {
            f64::INFINITY
        } else {
            10.0 * (peak * peak / mse).log10()
        };
        Ok(())
    })
}
