//! C ABI over the `ppgconv` conversion model.
//!
//! Objects cross the boundary as opaque handles (`PpgTensor`, `PpgModel`)
//! that the caller releases with the matching `*_free` function. Every
//! fallible call returns a `PpgStatus`; on failure, `ppg_last_error_message`
//! describes the most recent error on the calling thread.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use ppgconv::convmodel::{convert_ppg, load_checkpoint, ConversionModel};
use ppgconv::numcore::{io, Tensor};
use ppgconv::Error;

/// Status code returned by every fallible function.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PpgStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// Inputs inconsistent with the model configuration, such as a missing
    /// reference.
    Usage = 3,
    Dimension = 4,
    Contract = 5,
    /// Non-finite values during evaluation.
    Numeric = 6,
    /// Malformed file contents.
    Format = 7,
    Schema = 8,
    /// Checkpoint does not match its configuration.
    Load = 9,
    Io = 10,
    /// A caller-provided buffer is too small.
    BufferTooSmall = 11,
    /// An internal panic was caught at the boundary.
    Internal = 12,
}

impl From<&Error> for PpgStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Usage(_) => PpgStatus::Usage,
            Error::Dimension(_) => PpgStatus::Dimension,
            Error::Contract(_) | Error::Vocabulary { .. } | Error::DegenerateStats { .. } => PpgStatus::Contract,
            Error::Numeric { .. } | Error::Diverged { .. } | Error::GradientCheck(_) | Error::ArmsFailed(_) => {
                PpgStatus::Numeric
            }
            Error::Format(_) | Error::Json(_) => PpgStatus::Format,
            Error::Schema(_) => PpgStatus::Schema,
            Error::Load(_) => PpgStatus::Load,
            Error::Io { .. } => PpgStatus::Io,
        }
    }
}

/// Dense tensor of 64-bit reals.
pub struct PpgTensor(Tensor);

/// A loaded conversion model.
pub struct PpgModel(ConversionModel);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: PpgStatus, msg: impl Into<String>) -> PpgStatus {
    set_error(msg.into());
    status
}

/// Runs `f`, turning errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), PpgStatus>) -> PpgStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => PpgStatus::Ok,
        Ok(Err(s)) => s,
        Err(_) => fail(PpgStatus::Internal, "internal panic"),
    }
}

fn lib_err(e: Error) -> PpgStatus {
    let s = PpgStatus::from(&e);
    fail(s, e.to_string())
}

unsafe fn path_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, PpgStatus> {
    if p.is_null() {
        return Err(fail(PpgStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(PpgStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut *mut T, what: &str) -> Result<&'a mut *mut T, PpgStatus> {
    p.as_mut()
        .ok_or_else(|| fail(PpgStatus::NullArgument, format!("{what} is null")))
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ppg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or null if the last call
/// succeeded. Valid until the next call into the library on this thread.
#[no_mangle]
pub extern "C" fn ppg_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Creates a tensor by copying `len` values from `data` with the given
/// `rank`-dimensional `shape`.
///
/// # Safety
/// `shape` must point to `rank` values and `data` to `len` values.
#[no_mangle]
pub unsafe extern "C" fn ppg_tensor_new(
    shape: *const usize,
    rank: usize,
    data: *const f64,
    len: usize,
    out: *mut *mut PpgTensor,
) -> PpgStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        if (shape.is_null() && rank > 0) || (data.is_null() && len > 0) {
            return Err(fail(PpgStatus::NullArgument, "shape or data is null"));
        }
        let shape = if rank == 0 { &[][..] } else { std::slice::from_raw_parts(shape, rank) };
        let data = if len == 0 { &[][..] } else { std::slice::from_raw_parts(data, len) };
        let t = Tensor::new(shape.to_vec(), data.to_vec()).map_err(lib_err)?;
        *out = boxed(PpgTensor(t));
        Ok(())
    })
}

/// Reads a tensor from a TNSR file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ppg_tensor_load(path: *const c_char, out: *mut *mut PpgTensor) -> PpgStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let path = path_arg(path, "path")?;
        let t = io::load_tensor(path).map_err(lib_err)?;
        *out = boxed(PpgTensor(t));
        Ok(())
    })
}

/// Writes a tensor to a TNSR file.
///
/// # Safety
/// `tensor` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ppg_tensor_save(tensor: *const PpgTensor, path: *const c_char) -> PpgStatus {
    guard(|| {
        let t = tensor
            .as_ref()
            .ok_or_else(|| fail(PpgStatus::NullArgument, "tensor is null"))?;
        let path = path_arg(path, "path")?;
        io::save_tensor(path, &t.0).map_err(lib_err)
    })
}

/// Number of dimensions, or 0 for a null handle.
///
/// # Safety
/// `tensor` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ppg_tensor_rank(tensor: *const PpgTensor) -> usize {
    tensor.as_ref().map_or(0, |t| t.0.rank())
}

/// Number of elements, or 0 for a null handle.
///
/// # Safety
/// `tensor` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ppg_tensor_len(tensor: *const PpgTensor) -> usize {
    tensor.as_ref().map_or(0, |t| t.0.len())
}

/// Copies the shape into `shape` (capacity `cap`).
///
/// # Safety
/// `tensor` must be a live handle and `shape` writable for `cap` values.
#[no_mangle]
pub unsafe extern "C" fn ppg_tensor_shape(tensor: *const PpgTensor, shape: *mut usize, cap: usize) -> PpgStatus {
    guard(|| {
        let t = tensor
            .as_ref()
            .ok_or_else(|| fail(PpgStatus::NullArgument, "tensor is null"))?;
        let s = t.0.shape();
        if cap < s.len() {
            return Err(fail(
                PpgStatus::BufferTooSmall,
                format!("shape needs {} slots, got {cap}", s.len()),
            ));
        }
        if !s.is_empty() {
            if shape.is_null() {
                return Err(fail(PpgStatus::NullArgument, "shape is null"));
            }
            std::slice::from_raw_parts_mut(shape, s.len()).copy_from_slice(s);
        }
        Ok(())
    })
}

/// Row-major element data, valid while the handle lives; null for a null
/// handle.
///
/// # Safety
/// `tensor` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ppg_tensor_data(tensor: *const PpgTensor) -> *const f64 {
    tensor.as_ref().map_or(ptr::null(), |t| t.0.data().as_ptr())
}

/// Releases a tensor. Null is ignored.
///
/// # Safety
/// `tensor` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ppg_tensor_free(tensor: *mut PpgTensor) {
    if !tensor.is_null() {
        drop(Box::from_raw(tensor));
    }
}

/// Loads a checkpoint directory, verifying weights against its stored
/// configuration.
///
/// # Safety
/// `dir` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ppg_model_load(dir: *const c_char, out: *mut *mut PpgModel) -> PpgStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let dir = path_arg(dir, "dir")?;
        let ck = load_checkpoint(dir.as_ref(), None).map_err(lib_err)?;
        *out = boxed(PpgModel(ck.model));
        Ok(())
    })
}

/// Trainable scalar count, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ppg_model_param_count(model: *const PpgModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.params().num_scalars())
}

/// Whether the model needs a reference mel (`ref_mel`) and a phoneme
/// sequence (`phonemes`) in `ppg_model_convert`.
///
/// # Safety
/// `model` must be a live handle; the out pointers may be null.
#[no_mangle]
pub unsafe extern "C" fn ppg_model_requirements(
    model: *const PpgModel,
    needs_ref_mel: *mut bool,
    needs_phonemes: *mut bool,
) -> PpgStatus {
    guard(|| {
        let m = model
            .as_ref()
            .ok_or_else(|| fail(PpgStatus::NullArgument, "model is null"))?;
        if let Some(p) = needs_ref_mel.as_mut() {
            *p = m.0.config().use_mel_ref;
        }
        if let Some(p) = needs_phonemes.as_mut() {
            *p = m.0.config().use_phone_ref;
        }
        Ok(())
    })
}

/// Free-running conversion of a `[T × ppg_dim]` posteriorgram.
///
/// `ref_mel` and `phonemes` are required exactly when the model enables the
/// matching reference encoder; pass null otherwise. `max_steps == 0` picks
/// twice the expected decoder length. `mel_out` receives the
/// `[frames × mel_dim]` output; `alignment_out`, if not null, the
/// `[steps × T]` attention weights.
///
/// # Safety
/// Handles must be live; `phonemes` must point to `n_phonemes` values when
/// not null; `mel_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ppg_model_convert(
    model: *const PpgModel,
    ppg: *const PpgTensor,
    ref_mel: *const PpgTensor,
    phonemes: *const usize,
    n_phonemes: usize,
    max_steps: usize,
    mel_out: *mut *mut PpgTensor,
    alignment_out: *mut *mut PpgTensor,
) -> PpgStatus {
    guard(|| {
        let mel_out = out_arg(mel_out, "mel_out")?;
        let m = model
            .as_ref()
            .ok_or_else(|| fail(PpgStatus::NullArgument, "model is null"))?;
        let ppg = ppg
            .as_ref()
            .ok_or_else(|| fail(PpgStatus::NullArgument, "ppg is null"))?;
        let ref_mel = ref_mel.as_ref().map(|t| &t.0);
        let phonemes = if phonemes.is_null() {
            None
        } else {
            Some(std::slice::from_raw_parts(phonemes, n_phonemes))
        };
        let steps = (max_steps > 0).then_some(max_steps);
        let c = convert_ppg(&m.0, &ppg.0, ref_mel, phonemes, steps).map_err(lib_err)?;
        *mel_out = boxed(PpgTensor(c.mel));
        if let Some(a) = alignment_out.as_mut() {
            *a = boxed(PpgTensor(c.alignment));
        }
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ppg_model_free(model: *mut PpgModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
