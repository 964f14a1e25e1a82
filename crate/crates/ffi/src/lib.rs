//! C ABI over checkpoint loading, segmentation, Dice and tensor files.
//!
//! Every fallible function returns an [`FsStatus`]. On failure the message
//! is kept per thread and read back with [`fs_last_error_message`]. Handles
//! are opaque; each `*_free` accepts null.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use fewshot_seg::io::checkpoint::{load_checkpoint, Checkpoint};
use fewshot_seg::io::tensor_file::{read_any, write_tensor, AnyTensor};
use fewshot_seg::model::segment;
use fewshot_seg::tensor::Tensor;
use fewshot_seg::training::dice;
use fewshot_seg::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Shape = 5,
    Config = 6,
    Contract = 7,
    Panic = 8,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    // interior NULs cannot cross the boundary
    let text = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(text).ok());
}

fn status_of(e: &Error) -> FsStatus {
    match e {
        Error::Io { .. } => FsStatus::Io,
        Error::Parse { .. } => FsStatus::Parse,
        Error::Shape { .. } | Error::Dimension { .. } | Error::Index { .. } => FsStatus::Shape,
        Error::Config(_) | Error::ConfigParse { .. } | Error::UnknownKeys(_) | Error::ConfigType { .. } => {
            FsStatus::Config
        }
        _ => FsStatus::Contract,
    }
}

struct Fail(FsStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> FsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            FsStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            FsStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(FsStatus::NullPointer, format!("{what} is null"))
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(FsStatus::InvalidArgument, "path is not UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn image_len(height: usize, width: usize) -> Result<usize, Fail> {
    height
        .checked_mul(width)
        .filter(|&n| n > 0)
        .ok_or_else(|| Fail(FsStatus::InvalidArgument, format!("bad image size {height}x{width}")))
}

/// Message of the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn fs_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// A loaded checkpoint with one selected model.
pub struct FsModel {
    ckpt: Checkpoint,
    selected: usize,
}

/// Loads the checkpoint directory `dir`; the first stored model is selected.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fs_model_load(dir: *const c_char, out: *mut *mut FsModel) -> FsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let ckpt = load_checkpoint(&path_arg(dir)?)?;
        *out = Box::into_raw(Box::new(FsModel { ckpt, selected: 0 }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`fs_model_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fs_model_free(model: *mut FsModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Number of stored models, 0 for null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fs_model_count(model: *const FsModel) -> usize {
    model.as_ref().map_or(0, |m| m.ckpt.models.len())
}

/// Selects the stored model called `name`, e.g. `fold0` or `fold1_group0`.
///
/// # Safety
/// `model` must be a live handle and `name` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn fs_model_select(model: *mut FsModel, name: *const c_char) -> FsStatus {
    guard(|| {
        let m = model.as_mut().ok_or_else(|| null("model"))?;
        if name.is_null() {
            return Err(null("name"));
        }
        let name = CStr::from_ptr(name).to_string_lossy();
        m.selected = m
            .ckpt
            .models
            .iter()
            .position(|s| s.name() == name)
            .ok_or_else(|| Fail(FsStatus::InvalidArgument, format!("no stored model `{name}`")))?;
        Ok(())
    })
}

/// Writes the predicted binary query mask into `out_mask`. All buffers hold
/// `height * width` row-major values; nonzero support-mask entries are
/// foreground.
///
/// # Safety
/// Every pointer must reference `height * width` readable (or, for
/// `out_mask`, writable) elements.
#[no_mangle]
pub unsafe extern "C" fn fs_segment(
    model: *const FsModel,
    support: *const f32,
    support_mask: *const u8,
    query: *const f32,
    height: usize,
    width: usize,
    out_mask: *mut u8,
) -> FsStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let n = image_len(height, width)?;
        let tensor = |data: Vec<f32>| Tensor::new(vec![height, width], data);
        let s = tensor(slice_arg(support, n, "support")?.to_vec())?;
        let q = tensor(slice_arg(query, n, "query")?.to_vec())?;
        let mask: Vec<u8> = slice_arg(support_mask, n, "support_mask")?.iter().map(|&v| u8::from(v != 0)).collect();
        let mask = Tensor::new(vec![height, width], mask)?;
        if out_mask.is_null() {
            return Err(null("out_mask"));
        }
        let stored = &m.ckpt.models[m.selected];
        let pred = segment(&stored.params, &m.ckpt.config.model, &s, &mask, &q)?;
        std::slice::from_raw_parts_mut(out_mask, n).copy_from_slice(pred.data());
        Ok(())
    })
}

/// Dice score in `[0, 100]` of two binary masks of `len` elements.
///
/// # Safety
/// `pred` and `truth` must reference `len` bytes, `out` one `double`.
#[no_mangle]
pub unsafe extern "C" fn fs_dice(pred: *const u8, truth: *const u8, len: usize, out: *mut f64) -> FsStatus {
    guard(|| {
        if len == 0 {
            return Err(Fail(FsStatus::InvalidArgument, "masks are empty".into()));
        }
        let p = Tensor::new(vec![len], slice_arg(pred, len, "pred")?.to_vec())?;
        let t = Tensor::new(vec![len], slice_arg(truth, len, "truth")?.to_vec())?;
        let d = dice(&p, &t)?;
        *out.as_mut().ok_or_else(|| null("out"))? = d;
        Ok(())
    })
}

/// Element type codes, identical to the tensor file format.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FsDtype {
    F32 = 0,
    F64 = 1,
    U8 = 2,
}

/// A tensor read from a file.
pub struct FsTensor {
    inner: AnyTensor,
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fs_tensor_read(path: *const c_char, out: *mut *mut FsTensor) -> FsStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let inner = read_any(&path_arg(path)?)?;
        *out = Box::into_raw(Box::new(FsTensor { inner }));
        Ok(())
    })
}

/// # Safety
/// `t` must come from [`fs_tensor_read`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn fs_tensor_free(t: *mut FsTensor) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

/// # Safety
/// `t` must be a live handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn fs_tensor_dtype(t: *const FsTensor, out: *mut FsDtype) -> FsStatus {
    guard(|| {
        let t = t.as_ref().ok_or_else(|| null("tensor"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = match t.inner {
            AnyTensor::F32(_) => FsDtype::F32,
            AnyTensor::F64(_) => FsDtype::F64,
            AnyTensor::U8(_) => FsDtype::U8,
        };
        Ok(())
    })
}

/// Rank of the tensor, 0 for null.
///
/// # Safety
/// `t` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn fs_tensor_rank(t: *const FsTensor) -> usize {
    t.as_ref().map_or(0, |t| t.inner.shape().len())
}

/// Copies the dimensions into `dims`, which must hold `rank` entries.
///
/// # Safety
/// `t` must be a live handle and `dims` writable for `capacity` entries.
#[no_mangle]
pub unsafe extern "C" fn fs_tensor_dims(t: *const FsTensor, dims: *mut usize, capacity: usize) -> FsStatus {
    guard(|| {
        let t = t.as_ref().ok_or_else(|| null("tensor"))?;
        let shape = t.inner.shape();
        if capacity < shape.len() {
            return Err(Fail(FsStatus::InvalidArgument, format!("rank {} exceeds capacity {capacity}", shape.len())));
        }
        if !shape.is_empty() {
            if dims.is_null() {
                return Err(null("dims"));
            }
            std::slice::from_raw_parts_mut(dims, shape.len()).copy_from_slice(shape);
        }
        Ok(())
    })
}

unsafe fn copy_out<T: Copy>(src: Option<&[T]>, dst: *mut T, len: usize, want: &str) -> Result<(), Fail> {
    let src = src.ok_or_else(|| Fail(FsStatus::InvalidArgument, format!("tensor is not {want}")))?;
    if len != src.len() {
        return Err(Fail(FsStatus::Shape, format!("buffer holds {len} elements, tensor has {}", src.len())));
    }
    if dst.is_null() {
        return Err(null("out"));
    }
    std::slice::from_raw_parts_mut(dst, len).copy_from_slice(src);
    Ok(())
}

/// Copies an `f32` tensor's `len` elements into `out`.
///
/// # Safety
/// `t` must be a live handle and `out` writable for `len` floats.
#[no_mangle]
pub unsafe extern "C" fn fs_tensor_copy_f32(t: *const FsTensor, out: *mut f32, len: usize) -> FsStatus {
    guard(|| {
        let t = t.as_ref().ok_or_else(|| null("tensor"))?;
        let src = match &t.inner {
            AnyTensor::F32(x) => Some(x.data()),
            _ => None,
        };
        copy_out(src, out, len, "f32")
    })
}

/// Copies a `u8` tensor's `len` elements into `out`.
///
/// # Safety
/// `t` must be a live handle and `out` writable for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn fs_tensor_copy_u8(t: *const FsTensor, out: *mut u8, len: usize) -> FsStatus {
    guard(|| {
        let t = t.as_ref().ok_or_else(|| null("tensor"))?;
        let src = match &t.inner {
            AnyTensor::U8(x) => Some(x.data()),
            _ => None,
        };
        copy_out(src, out, len, "u8")
    })
}

unsafe fn shaped<T: Copy>(dims: *const usize, rank: usize, data: *const T) -> Result<Tensor<T>, Fail> {
    let shape = if rank == 0 { Vec::new() } else { slice_arg(dims, rank, "dims")?.to_vec() };
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Fail(FsStatus::InvalidArgument, "element count overflows".into()))?;
    Ok(Tensor::new(shape, slice_arg(data, n, "data")?.to_vec())?)
}

/// Writes a row-major `f32` tensor of the given dimensions.
///
/// # Safety
/// `dims` must hold `rank` entries and `data` their product of floats.
#[no_mangle]
pub unsafe extern "C" fn fs_tensor_write_f32(
    path: *const c_char,
    dims: *const usize,
    rank: usize,
    data: *const f32,
) -> FsStatus {
    guard(|| Ok(write_tensor(&path_arg(path)?, &shaped(dims, rank, data)?)?))
}

/// Writes a row-major `u8` tensor of the given dimensions.
///
/// # Safety
/// `dims` must hold `rank` entries and `data` their product of bytes.
#[no_mangle]
pub unsafe extern "C" fn fs_tensor_write_u8(
    path: *const c_char,
    dims: *const usize,
    rank: usize,
    data: *const u8,
) -> FsStatus {
    guard(|| Ok(write_tensor(&path_arg(path)?, &shaped(dims, rank, data)?)?))
}
