//! C ABI over the `cgmmd` library.
//!
//! Every entry point returns a [`CgmmdStatus`]. On failure the message is
//! kept per thread and can be read with [`cgmmd_last_error_message`].
//! Matrices are row-major `double` arrays.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use cgmmd::ecmmd::estimate;
use cgmmd::generator::{load_checkpoint, GeneratorNet};
use cgmmd::kernels::{KernelConfig, KernelFamily};
use cgmmd::knn::KnnGraph;
use cgmmd::{Error, Matrix};

/// Result codes returned by every function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CgmmdStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    NonFinite = 4,
    Io = 5,
    Checkpoint = 6,
    Panic = 7,
    Internal = 8,
}

/// Kernel families accepted by `cgmmd_ecmmd_estimate`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CgmmdKernel {
    Gaussian = 0,
    Laplace = 1,
}

/// Opaque handle to a loaded generator.
pub struct CgmmdGenerator {
    net: GeneratorNet,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn status_of(e: &Error) -> CgmmdStatus {
    match e {
        Error::DimensionMismatch(_) => CgmmdStatus::DimensionMismatch,
        Error::InvalidParameter(_) | Error::IndexOutOfRange { .. } | Error::Config(_) => CgmmdStatus::InvalidArgument,
        Error::NonFinite(_) | Error::Diverged { .. } => CgmmdStatus::NonFinite,
        Error::Io { .. } | Error::Csv { .. } => CgmmdStatus::Io,
        Error::CheckpointVersion { .. } | Error::CheckpointCorrupt(_) => CgmmdStatus::Checkpoint,
        _ => CgmmdStatus::Internal,
    }
}

struct Fail(CgmmdStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(body: impl FnOnce() -> Result<(), Fail>) -> CgmmdStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(Ok(())) => CgmmdStatus::Ok,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic".into());
            CgmmdStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(CgmmdStatus::NullPointer, format!("{what} is null"))
}

unsafe fn slice<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn checked_len(a: usize, b: usize) -> Result<usize, Fail> {
    a.checked_mul(b)
        .ok_or_else(|| Fail(CgmmdStatus::InvalidArgument, "size overflow".into()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cgmmd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread, or NULL if it succeeded.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn cgmmd_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a generator from checkpoint bytes.
///
/// # Safety
/// `bytes` must point to `len` readable bytes and `out` to writable storage.
#[no_mangle]
pub unsafe extern "C" fn cgmmd_generator_load(bytes: *const u8, len: usize, out: *mut *mut CgmmdGenerator) -> CgmmdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if bytes.is_null() {
            return Err(null("bytes"));
        }
        let net = load_checkpoint(std::slice::from_raw_parts(bytes, len))?;
        *out = Box::into_raw(Box::new(CgmmdGenerator { net }));
        Ok(())
    })
}

/// Loads a generator from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn cgmmd_generator_load_path(path: *const c_char, out: *mut *mut CgmmdGenerator) -> CgmmdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        if path.is_null() {
            return Err(null("path"));
        }
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Fail(CgmmdStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let bytes = std::fs::read(path).map_err(|e| Fail(CgmmdStatus::Io, format!("io error on {path}: {e}")))?;
        let net = load_checkpoint(&bytes)?;
        *out = Box::into_raw(Box::new(CgmmdGenerator { net }));
        Ok(())
    })
}

/// Releases a generator. Passing NULL is a no-op.
///
/// # Safety
/// `gen` must come from a load function and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn cgmmd_generator_free(gen: *mut CgmmdGenerator) {
    if !gen.is_null() {
        drop(Box::from_raw(gen));
    }
}

/// Writes the predictor, noise and response dimensions.
///
/// # Safety
/// `gen` must be a live handle; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn cgmmd_generator_dims(
    gen: *const CgmmdGenerator,
    d: *mut usize,
    m: *mut usize,
    p: *mut usize,
) -> CgmmdStatus {
    guard(|| {
        let g = gen.as_ref().ok_or_else(|| null("gen"))?;
        if d.is_null() || m.is_null() || p.is_null() {
            return Err(null("dimension output"));
        }
        let c = g.net.config();
        *d = c.d;
        *m = c.m;
        *p = c.p;
        Ok(())
    })
}

/// Evaluates the generator on `n` rows of noise (`n x m`) and predictors
/// (`n x d`), writing `n x p` responses to `out`.
///
/// # Safety
/// All arrays must have the sizes above.
#[no_mangle]
pub unsafe extern "C" fn cgmmd_generator_generate(
    gen: *const CgmmdGenerator,
    eta: *const f64,
    x: *const f64,
    n: usize,
    out: *mut f64,
) -> CgmmdStatus {
    guard(|| {
        let g = gen.as_ref().ok_or_else(|| null("gen"))?;
        let c = g.net.config();
        let eta = Matrix::new(n, c.m, slice(eta, checked_len(n, c.m)?, "eta")?.to_vec())?;
        let x = Matrix::new(n, c.d, slice(x, checked_len(n, c.d)?, "x")?.to_vec())?;
        let y = g.net.generate(&eta, &x)?;
        write_out(out, y.data())
    })
}

/// Draws `n` responses at the single predictor value `x` (length `d`) with
/// noise seeded by `seed`, writing `n x p` values to `out`.
///
/// # Safety
/// `x` must hold `d` values and `out` room for `n * p`.
#[no_mangle]
pub unsafe extern "C" fn cgmmd_generator_sample(
    gen: *const CgmmdGenerator,
    x: *const f64,
    n: usize,
    seed: u64,
    out: *mut f64,
) -> CgmmdStatus {
    guard(|| {
        let g = gen.as_ref().ok_or_else(|| null("gen"))?;
        let x = slice(x, g.net.config().d, "x")?;
        let y = g.net.sample_at(x, n, seed)?;
        write_out(out, y.data())
    })
}

unsafe fn write_out(out: *mut f64, data: &[f64]) -> Result<(), Fail> {
    if data.is_empty() {
        return Ok(());
    }
    if out.is_null() {
        return Err(null("out"));
    }
    ptr::copy_nonoverlapping(data.as_ptr(), out, data.len());
    Ok(())
}

/// Builds the k-nearest-neighbor graph of `n` points (`n x d`) and writes
/// the neighbor indices, `k` per point in ascending distance, to `out`.
///
/// # Safety
/// `x` must hold `n * d` values and `out` room for `n * k` indices.
#[no_mangle]
pub unsafe extern "C" fn cgmmd_knn_build(x: *const f64, n: usize, d: usize, k: usize, out: *mut usize) -> CgmmdStatus {
    guard(|| {
        let pts = Matrix::new(n, d, slice(x, checked_len(n, d)?, "x")?.to_vec())?;
        let graph = KnnGraph::build(&pts, k)?;
        if out.is_null() {
            return Err(null("out"));
        }
        for i in 0..n {
            let nb = graph.neighbors_unchecked(i);
            ptr::copy_nonoverlapping(nb.as_ptr(), out.add(i * k), k);
        }
        Ok(())
    })
}

/// k-NN ECMMD estimate between observed responses `y` and generated
/// responses `z` (both `n x p`) given predictors `x` (`n x d`).
///
/// # Safety
/// Arrays must have the sizes above and `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cgmmd_ecmmd_estimate(
    x: *const f64,
    y: *const f64,
    z: *const f64,
    n: usize,
    d: usize,
    p: usize,
    k: usize,
    kernel: CgmmdKernel,
    bandwidth: f64,
    out: *mut f64,
) -> CgmmdStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let family = match kernel {
            CgmmdKernel::Gaussian => KernelFamily::Gaussian,
            CgmmdKernel::Laplace => KernelFamily::Laplace,
        };
        let kernel = KernelConfig::new(family, bandwidth)?;
        let xs = Matrix::new(n, d, slice(x, checked_len(n, d)?, "x")?.to_vec())?;
        let ys = Matrix::new(n, p, slice(y, checked_len(n, p)?, "y")?.to_vec())?;
        let zs = Matrix::new(n, p, slice(z, checked_len(n, p)?, "z")?.to_vec())?;
        let graph = KnnGraph::build(&xs, k)?;
        *out = estimate(&graph, &ys, &zs, kernel)?;
        Ok(())
    })
}
