//! C ABI for the convnorm library.
//!
//! Conventions: every fallible function returns a [`CnStatus`]; `Ok` is
//! zero. On failure a UTF-8 description is stored per thread and stays
//! readable through [`cn_last_error`] until the next failure on the
//! same thread. Tensors are opaque heap handles owned by this library:
//! create them with `cn_tensor_new` or `cn_tensor_read`, destroy them
//! with `cn_tensor_free`. Strings returned through out-parameters are
//! owned by the caller and freed with `cn_string_free`.
//!
//! The committed C header `include/convnorm.h` is regenerated by the
//! build script and must not be edited by hand.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use convnorm::norm::{conv_layer_circular, normalize_with_kernels};
use convnorm::{io, reparam_kernels, spectral, ActivationBatch, Error, KernelStack, Tensor};

/// Status of a call. Zero is success; anything else is a failure whose
/// detail is available from `cn_last_error` on the calling thread.
#[repr(i32)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CnStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// Arguments violate an operation's contract (bad shape, rank,
    /// extents, or parameter domain).
    InvalidArgument = 2,
    /// A combined kernel spectrum vanishes and eps is zero.
    SingularSpectrum = 3,
    /// The operating system rejected a file operation.
    IoError = 4,
    /// A file does not decode as the CNT1 tensor format.
    FormatError = 5,
    /// A tensor value is NaN or infinite.
    NonFinite = 6,
    /// An internal invariant failed; the library state is still sound.
    Panic = 7,
}

/// Opaque dense row-major f64 tensor handle.
pub struct CnTensor {
    inner: Tensor,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: &str) {
    // Interior NULs cannot survive the CString round trip.
    let sanitized: String = message.chars().filter(|&c| c != '\0').collect();
    let text = CString::new(sanitized).expect("NULs were stripped");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(text));
}

fn status_of(err: &Error) -> CnStatus {
    match err {
        Error::Shape(_) | Error::Argument(_) => CnStatus::InvalidArgument,
        Error::NonFinite { .. } => CnStatus::NonFinite,
        Error::Format { .. } => CnStatus::FormatError,
        Error::Io { .. } => CnStatus::IoError,
        Error::SingularSpectrum { .. } => CnStatus::SingularSpectrum,
    }
}

fn fail(err: Error) -> CnStatus {
    set_error(&err.to_string());
    status_of(&err)
}

fn fail_null(name: &str) -> CnStatus {
    set_error(&format!("argument {name} is null"));
    CnStatus::NullArgument
}

/// Runs `f` with a panic guard so unwinding never crosses the ABI.
fn guarded(f: impl FnOnce() -> CnStatus) -> CnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".to_string());
            set_error(&format!("internal panic: {msg}"));
            CnStatus::Panic
        }
    }
}

/// Most recent failure description on this thread, or null if no call
/// has failed yet.
///
/// # Safety
/// The returned pointer is owned by the library and valid until the
/// next failing call on the same thread. Do not free it.
#[no_mangle]
pub unsafe extern "C" fn cn_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| {
        slot.borrow()
            .as_ref()
            .map_or(ptr::null(), |text| text.as_ptr())
    })
}

/// Frees a string returned by this library through an out-parameter.
/// Null is ignored.
///
/// # Safety
/// `s` must be a pointer previously produced by this library's string
/// out-parameters and not freed since.
#[no_mangle]
pub unsafe extern "C" fn cn_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}

unsafe fn tensor_ref<'a>(t: *const CnTensor) -> Option<&'a Tensor> {
    unsafe { t.as_ref() }.map(|h| &h.inner)
}

fn emit_tensor(out: *mut *mut CnTensor, inner: Tensor) -> CnStatus {
    let handle = Box::into_raw(Box::new(CnTensor { inner }));
    unsafe { *out = handle };
    CnStatus::Ok
}

unsafe fn path_arg(path: *const c_char) -> Result<PathBuf, CnStatus> {
    if path.is_null() {
        return Err(fail_null("path"));
    }
    match unsafe { CStr::from_ptr(path) }.to_str() {
        Ok(s) => Ok(PathBuf::from(s)),
        Err(_) => {
            set_error("path is not valid UTF-8");
            Err(CnStatus::InvalidArgument)
        }
    }
}

/// Creates a tensor from a shape and row-major data. `data_len` must
/// equal the product of the extents.
///
/// # Safety
/// `shape` must point to `rank` readable `uintptr_t`s, `data` to
/// `data_len` readable doubles, and `out` must be writable. On success
/// `*out` owns the new handle.
#[no_mangle]
pub unsafe extern "C" fn cn_tensor_new(
    shape: *const usize,
    rank: usize,
    data: *const f64,
    data_len: usize,
    out: *mut *mut CnTensor,
) -> CnStatus {
    guarded(|| {
        if out.is_null() {
            return fail_null("out");
        }
        if shape.is_null() {
            return fail_null("shape");
        }
        if data.is_null() {
            return fail_null("data");
        }
        let shape = unsafe { std::slice::from_raw_parts(shape, rank) }.to_vec();
        let data = unsafe { std::slice::from_raw_parts(data, data_len) }.to_vec();
        match Tensor::new(shape, data) {
            Ok(t) => emit_tensor(out, t),
            Err(e) => fail(e),
        }
    })
}

/// Destroys a tensor handle. Null is ignored.
///
/// # Safety
/// `t` must be a handle from this library that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn cn_tensor_free(t: *mut CnTensor) {
    if !t.is_null() {
        drop(unsafe { Box::from_raw(t) });
    }
}

/// Writes the number of axes to `*out`.
///
/// # Safety
/// `t` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cn_tensor_rank(t: *const CnTensor, out: *mut usize) -> CnStatus {
    guarded(|| {
        let (Some(tensor), false) = (unsafe { tensor_ref(t) }, out.is_null()) else {
            return fail_null("t or out");
        };
        unsafe { *out = tensor.rank() };
        CnStatus::Ok
    })
}

/// Writes the extent of `axis` to `*out`.
///
/// # Safety
/// `t` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cn_tensor_extent(
    t: *const CnTensor,
    axis: usize,
    out: *mut usize,
) -> CnStatus {
    guarded(|| {
        let (Some(tensor), false) = (unsafe { tensor_ref(t) }, out.is_null()) else {
            return fail_null("t or out");
        };
        match tensor.shape().get(axis) {
            Some(&e) => {
                unsafe { *out = e };
                CnStatus::Ok
            }
            None => {
                set_error(&format!(
                    "axis {axis} out of range for rank {}",
                    tensor.rank()
                ));
                CnStatus::InvalidArgument
            }
        }
    })
}

/// Writes the total element count to `*out`.
///
/// # Safety
/// `t` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cn_tensor_len(t: *const CnTensor, out: *mut usize) -> CnStatus {
    guarded(|| {
        let (Some(tensor), false) = (unsafe { tensor_ref(t) }, out.is_null()) else {
            return fail_null("t or out");
        };
        unsafe { *out = tensor.len() };
        CnStatus::Ok
    })
}

/// Writes a borrowed pointer to the row-major data to `*out`.
///
/// # Safety
/// `t` must be a live handle; `out` must be writable. The data pointer
/// is valid until the handle is freed and must not be written through.
#[no_mangle]
pub unsafe extern "C" fn cn_tensor_data(t: *const CnTensor, out: *mut *const f64) -> CnStatus {
    guarded(|| {
        let (Some(tensor), false) = (unsafe { tensor_ref(t) }, out.is_null()) else {
            return fail_null("t or out");
        };
        unsafe { *out = tensor.data().as_ptr() };
        CnStatus::Ok
    })
}

/// Reads a CNT1 file into a new tensor handle.
///
/// # Safety
/// `path` must be a NUL-terminated UTF-8 string; `out` must be
/// writable. On success `*out` owns the new handle.
#[no_mangle]
pub unsafe extern "C" fn cn_tensor_read(path: *const c_char, out: *mut *mut CnTensor) -> CnStatus {
    guarded(|| {
        if out.is_null() {
            return fail_null("out");
        }
        let path = match unsafe { path_arg(path) } {
            Ok(p) => p,
            Err(status) => return status,
        };
        match io::read_tensor(&path) {
            Ok(t) => emit_tensor(out, t),
            Err(e) => fail(e),
        }
    })
}

/// Writes a tensor to a CNT1 file.
///
/// # Safety
/// `t` must be a live handle; `path` must be a NUL-terminated UTF-8
/// string.
#[no_mangle]
pub unsafe extern "C" fn cn_tensor_write(path: *const c_char, t: *const CnTensor) -> CnStatus {
    guarded(|| {
        let Some(tensor) = (unsafe { tensor_ref(t) }) else {
            return fail_null("t");
        };
        let path = match unsafe { path_arg(path) } {
            Ok(p) => p,
            Err(status) => return status,
        };
        match io::write_tensor(&path, tensor) {
            Ok(()) => CnStatus::Ok,
            Err(e) => fail(e),
        }
    })
}

unsafe fn kernel_arg(kernels: *const CnTensor) -> Result<KernelStack, CnStatus> {
    let Some(tensor) = (unsafe { tensor_ref(kernels) }) else {
        return Err(fail_null("kernels"));
    };
    KernelStack::new(tensor.clone()).map_err(fail)
}

/// Reparametrizes a rank-4 kernel stack (C_O, C_I, k1, k2) to a tight
/// frame on an `h` by `w` grid; the result has spatial extents (h, w).
///
/// # Safety
/// `kernels` must be a live handle; `out` must be writable. On success
/// `*out` owns the new handle.
#[no_mangle]
pub unsafe extern "C" fn cn_reparam_kernels(
    kernels: *const CnTensor,
    h: usize,
    w: usize,
    eps: f64,
    out: *mut *mut CnTensor,
) -> CnStatus {
    guarded(|| {
        if out.is_null() {
            return fail_null("out");
        }
        let stack = match unsafe { kernel_arg(kernels) } {
            Ok(s) => s,
            Err(status) => return status,
        };
        match reparam_kernels(&stack, (h, w), eps) {
            Ok(g) => emit_tensor(out, g.weights().clone()),
            Err(e) => fail(e),
        }
    })
}

/// Applies the channel-normalized convolution to a rank-4 activation
/// batch (B, C_I, H, W): convolve with the kernels, then filter each
/// output channel by its preconditioner spectrum.
///
/// # Safety
/// `z` and `kernels` must be live handles; `out` must be writable. On
/// success `*out` owns the new handle.
#[no_mangle]
pub unsafe extern "C" fn cn_normalize_activations(
    z: *const CnTensor,
    kernels: *const CnTensor,
    eps: f64,
    out: *mut *mut CnTensor,
) -> CnStatus {
    guarded(|| {
        if out.is_null() {
            return fail_null("out");
        }
        let Some(ztensor) = (unsafe { tensor_ref(z) }) else {
            return fail_null("z");
        };
        let stack = match unsafe { kernel_arg(kernels) } {
            Ok(s) => s,
            Err(status) => return status,
        };
        let result = ActivationBatch::new(ztensor.clone()).and_then(|batch| {
            let conv = conv_layer_circular(&batch, &stack)?;
            let (normalized, _) = normalize_with_kernels(&conv, &stack, eps)?;
            Ok(normalized)
        });
        match result {
            Ok(batch) => emit_tensor(out, batch.into_values()),
            Err(e) => fail(e),
        }
    })
}

/// Serializes the spectral report of a kernel stack on an `h` by `w`
/// grid as pretty-printed JSON. Free the string with `cn_string_free`.
///
/// # Safety
/// `kernels` must be a live handle; `out` must be writable. On success
/// `*out` owns the new string.
#[no_mangle]
pub unsafe extern "C" fn cn_spectral_report_json(
    kernels: *const CnTensor,
    h: usize,
    w: usize,
    out: *mut *mut c_char,
) -> CnStatus {
    guarded(|| {
        if out.is_null() {
            return fail_null("out");
        }
        let stack = match unsafe { kernel_arg(kernels) } {
            Ok(s) => s,
            Err(status) => return status,
        };
        match spectral::spectral_report(&stack, (h, w)) {
            Ok(report) => {
                let json = serde_json::to_string_pretty(&report).expect("report serialization");
                let text = CString::new(json).expect("JSON has no NULs");
                unsafe { *out = text.into_raw() };
                CnStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Writes κ(Q_k) for output channel `k` to `*out`; the value is +INFINITY
/// when the channel's smallest singular value is at the spectral floor.
///
/// # Safety
/// `kernels` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cn_channel_condition_number(
    kernels: *const CnTensor,
    k: usize,
    h: usize,
    w: usize,
    out: *mut f64,
) -> CnStatus {
    guarded(|| {
        if out.is_null() {
            return fail_null("out");
        }
        let stack = match unsafe { kernel_arg(kernels) } {
            Ok(s) => s,
            Err(status) => return status,
        };
        match spectral::channel_condition_number(&stack, k, (h, w)) {
            Ok(kappa) => {
                unsafe { *out = kappa };
                CnStatus::Ok
            }
            Err(e) => fail(e),
        }
    })
}

/// Writes max over frequencies of |Σ_j |ĝ_kj|² − 1| across channels to
/// `*out`: zero exactly when every channel operator is a tight frame.
///
/// # Safety
/// `kernels` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cn_tight_frame_residual(
    kernels: *const CnTensor,
    h: usize,
    w: usize,
    out: *mut f64,
) -> CnStatus {
    guarded(|| {
        if out.is_null() {
            return fail_null("out");
        }
        let stack = match unsafe { kernel_arg(kernels) } {
            Ok(s) => s,
            Err(status) => return status,
        };
        let mut worst = 0.0f64;
        for k in 0..stack.c_out() {
            match spectral::tight_frame_residual(&stack, k, (h, w)) {
                Ok(residual) => worst = worst.max(residual),
                Err(e) => return fail(e),
            }
        }
        unsafe { *out = worst };
        CnStatus::Ok
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn make(shape: &[usize], data: &[f64]) -> *mut CnTensor {
        let mut out = ptr::null_mut();
        let status = unsafe {
            cn_tensor_new(
                shape.as_ptr(),
                shape.len(),
                data.as_ptr(),
                data.len(),
                &mut out,
            )
        };
        assert_eq!(status, CnStatus::Ok);
        assert!(!out.is_null());
        out
    }

    fn last_error_text() -> String {
        let p = unsafe { cn_last_error() };
        assert!(!p.is_null());
        unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string()
    }

    #[test]
    fn tensor_round_trip_through_the_handle_api() {
        let t = make(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut rank = 0usize;
        let mut len = 0usize;
        let mut e0 = 0usize;
        let mut e1 = 0usize;
        let mut data: *const f64 = ptr::null();
        unsafe {
            assert_eq!(cn_tensor_rank(t, &mut rank), CnStatus::Ok);
            assert_eq!(cn_tensor_len(t, &mut len), CnStatus::Ok);
            assert_eq!(cn_tensor_extent(t, 0, &mut e0), CnStatus::Ok);
            assert_eq!(cn_tensor_extent(t, 1, &mut e1), CnStatus::Ok);
            assert_eq!(cn_tensor_data(t, &mut data), CnStatus::Ok);
        }
        assert_eq!((rank, len, e0, e1), (2, 6, 2, 3));
        let values = unsafe { std::slice::from_raw_parts(data, len) };
        assert_eq!(values, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        unsafe { cn_tensor_free(t) };
    }

    #[test]
    fn null_arguments_are_reported_not_dereferenced() {
        let mut out = ptr::null_mut();
        let status = unsafe { cn_tensor_new(ptr::null(), 2, ptr::null(), 0, &mut out) };
        assert_eq!(status, CnStatus::NullArgument);
        assert!(last_error_text().contains("null"));

        let mut rank = 0usize;
        assert_eq!(
            unsafe { cn_tensor_rank(ptr::null(), &mut rank) },
            CnStatus::NullArgument
        );
        unsafe { cn_tensor_free(ptr::null_mut()) };
        unsafe { cn_string_free(ptr::null_mut()) };
    }

    #[test]
    fn shape_violations_map_to_invalid_argument() {
        let shape = [2usize, 2];
        let data = [1.0f64; 3];
        let mut out = ptr::null_mut();
        let status = unsafe {
            cn_tensor_new(
                shape.as_ptr(),
                shape.len(),
                data.as_ptr(),
                data.len(),
                &mut out,
            )
        };
        assert_eq!(status, CnStatus::InvalidArgument);
        assert!(last_error_text().contains("bad shape"));
    }

    #[test]
    fn reparam_produces_a_tight_frame_through_the_abi() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..2 * 2 * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let kernels = make(&[2, 2, 3, 3], &data);

        let mut g = ptr::null_mut();
        assert_eq!(
            unsafe { cn_reparam_kernels(kernels, 8, 8, 0.0, &mut g) },
            CnStatus::Ok
        );
        let mut residual = f64::NAN;
        assert_eq!(
            unsafe { cn_tight_frame_residual(g, 8, 8, &mut residual) },
            CnStatus::Ok
        );
        assert!(residual < 1e-8, "residual {residual}");

        let mut kappa = f64::NAN;
        assert_eq!(
            unsafe { cn_channel_condition_number(g, 0, 8, 8, &mut kappa) },
            CnStatus::Ok
        );
        assert!((kappa - 1.0).abs() < 1e-6, "kappa {kappa}");

        unsafe {
            cn_tensor_free(kernels);
            cn_tensor_free(g);
        }
    }

    #[test]
    fn singular_spectrum_surfaces_its_code_and_frequency() {
        let kernels = make(&[1, 1, 1, 2], &[1.0, 1.0]);
        let mut g = ptr::null_mut();
        let status = unsafe { cn_reparam_kernels(kernels, 4, 4, 0.0, &mut g) };
        assert_eq!(status, CnStatus::SingularSpectrum);
        assert!(last_error_text().contains("frequency index 2"));
        unsafe { cn_tensor_free(kernels) };
    }

    #[test]
    fn normalize_activations_matches_the_library_route() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(5);
        let kdata: Vec<f64> = (0..2 * 9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let zdata: Vec<f64> = (0..2 * 2 * 25).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let kernels = make(&[1, 2, 3, 3], &kdata);
        let z = make(&[2, 2, 5, 5], &zdata);

        let mut y = ptr::null_mut();
        assert_eq!(
            unsafe { cn_normalize_activations(z, kernels, 1e-12, &mut y) },
            CnStatus::Ok
        );
        let mut len = 0usize;
        let mut data: *const f64 = ptr::null();
        unsafe {
            assert_eq!(cn_tensor_len(y, &mut len), CnStatus::Ok);
            assert_eq!(cn_tensor_data(y, &mut data), CnStatus::Ok);
        }
        let through_abi = unsafe { std::slice::from_raw_parts(data, len) }.to_vec();

        let stack = KernelStack::new(Tensor::new(vec![1, 2, 3, 3], kdata).unwrap()).unwrap();
        let batch = ActivationBatch::new(Tensor::new(vec![2, 2, 5, 5], zdata).unwrap()).unwrap();
        let conv = conv_layer_circular(&batch, &stack).unwrap();
        let (expected, _) = normalize_with_kernels(&conv, &stack, 1e-12).unwrap();
        assert_eq!(through_abi, expected.values().data());

        unsafe {
            cn_tensor_free(kernels);
            cn_tensor_free(z);
            cn_tensor_free(y);
        }
    }

    #[test]
    fn report_json_parses_with_the_documented_keys() {
        let kernels = make(&[1, 1, 1, 1], &[1.0]);
        let mut text: *mut c_char = ptr::null_mut();
        assert_eq!(
            unsafe { cn_spectral_report_json(kernels, 4, 4, &mut text) },
            CnStatus::Ok
        );
        let json = unsafe { CStr::from_ptr(text) }
            .to_str()
            .unwrap()
            .to_string();
        unsafe { cn_string_free(text) };
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        for key in [
            "channel_condition_numbers",
            "channel_spectral_norms",
            "spectral_norm",
            "prop31_bound",
            "prop31_slack",
            "layer_singular_values",
            "zero_sv_count",
        ] {
            assert!(v.get(key).is_some(), "missing key {key}");
        }
        assert_eq!(v["channel_condition_numbers"][0].as_f64().unwrap(), 1.0);
        unsafe { cn_tensor_free(kernels) };
    }

    #[test]
    fn file_round_trip_through_the_abi() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.cnt1");
        let cpath = CString::new(path.to_str().unwrap()).unwrap();
        let t = make(&[2, 2], &[1.5, -2.5, 0.0, 4.0]);
        assert_eq!(unsafe { cn_tensor_write(cpath.as_ptr(), t) }, CnStatus::Ok);

        let mut back = ptr::null_mut();
        assert_eq!(
            unsafe { cn_tensor_read(cpath.as_ptr(), &mut back) },
            CnStatus::Ok
        );
        let mut len = 0usize;
        let mut data: *const f64 = ptr::null();
        unsafe {
            assert_eq!(cn_tensor_len(back, &mut len), CnStatus::Ok);
            assert_eq!(cn_tensor_data(back, &mut data), CnStatus::Ok);
        }
        assert_eq!(
            unsafe { std::slice::from_raw_parts(data, len) },
            &[1.5, -2.5, 0.0, 4.0]
        );

        // Unreadable paths surface as IO errors with the path named.
        let missing = CString::new(dir.path().join("absent.cnt1").to_str().unwrap()).unwrap();
        let mut none = ptr::null_mut();
        assert_eq!(
            unsafe { cn_tensor_read(missing.as_ptr(), &mut none) },
            CnStatus::IoError
        );
        assert!(last_error_text().contains("absent.cnt1"));

        unsafe {
            cn_tensor_free(t);
            cn_tensor_free(back);
        }
    }
}
