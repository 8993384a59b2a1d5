//! C interface to the enhancement pipeline: opaque handles, integer status
//! codes, path-based operations.
//!
//! Every entry point catches panics, so no unwinding crosses the boundary.
//! String arguments are NUL-terminated UTF-8 file paths. On failure a
//! thread-local message describing the error is available through
//! [`relight_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use relight::checkpoint::{load_checkpoint, CheckpointMeta};
use relight::enhancer::enhance_padded;
use relight::imaging::{load_image, save_image};
use relight::params::ModelParameters;
use relight::retinex::decompose;
use relight::segmentation::{make_toy_backend, ToySegmenter};
use relight::Error;

/// Result of a C API call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RelightStatus {
    /// The call succeeded.
    Ok = 0,
    /// A required pointer argument was NULL.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// The filesystem said no: missing file, unwritable path.
    Io = 3,
    /// The image could not be decoded or encoded.
    BadImage = 4,
    /// The checkpoint is malformed or inconsistent.
    BadCheckpoint = 5,
    /// Inputs failed validation (shapes, dimensions, config).
    InvalidInput = 6,
    /// An internal panic was caught.
    Panic = 7,
}

/// A loaded model: trained parameters plus the frozen segmentation backend
/// reconstructed from the checkpoint's seeds. Opaque to C callers.
pub struct RelightEnhancer {
    params: ModelParameters,
    meta: CheckpointMeta,
    backend: ToySegmenter,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let c = CString::new(msg.replace('\0', "?")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn fail(e: &Error) -> RelightStatus {
    set_last_error(&e.to_string());
    match e {
        Error::Io { .. } => RelightStatus::Io,
        Error::Format { .. } | Error::Codec { .. } => RelightStatus::BadImage,
        Error::Checkpoint(_) => RelightStatus::BadCheckpoint,
        _ => RelightStatus::InvalidInput,
    }
}

/// Runs `f` with panics converted to a status code.
fn guarded(f: impl FnOnce() -> RelightStatus) -> RelightStatus {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| {
        set_last_error("internal panic");
        RelightStatus::Panic
    })
}

/// Borrows a path argument, reporting NULL and non-UTF-8 via `Err`.
fn path_arg<'a>(p: *const c_char, name: &str) -> Result<&'a str, RelightStatus> {
    if p.is_null() {
        set_last_error(&format!("{name} is NULL"));
        return Err(RelightStatus::NullArgument);
    }
    // Safety: non-null, and the caller promises a NUL-terminated string.
    unsafe { CStr::from_ptr(p) }.to_str().map_err(|_| {
        set_last_error(&format!("{name} is not valid UTF-8"));
        RelightStatus::InvalidUtf8
    })
}

/// Loads a checkpoint and writes a handle to `out`. The handle owns its
/// model and must be released with [`relight_enhancer_free`].
#[no_mangle]
pub extern "C" fn relight_enhancer_load(
    checkpoint_path: *const c_char,
    out: *mut *mut RelightEnhancer,
) -> RelightStatus {
    guarded(|| {
        if out.is_null() {
            set_last_error("out is NULL");
            return RelightStatus::NullArgument;
        }
        let path = match path_arg(checkpoint_path, "checkpoint_path") {
            Ok(p) => p,
            Err(s) => return s,
        };
        let (params, meta) = match load_checkpoint(path) {
            Ok(v) => v,
            Err(e) => return fail(&e),
        };
        let backend = match make_toy_backend(meta.seg_seed, meta.net.seg_classes, meta.net.scales)
        {
            Ok(b) => b,
            Err(e) => return fail(&e),
        };
        let handle = Box::new(RelightEnhancer {
            params,
            meta,
            backend,
        });
        // Safety: out is non-null and points to caller-owned storage.
        unsafe { *out = Box::into_raw(handle) };
        RelightStatus::Ok
    })
}

/// Releases a handle. NULL is a no-op. The handle must not be used again.
#[no_mangle]
pub extern "C" fn relight_enhancer_free(handle: *mut RelightEnhancer) {
    if !handle.is_null() {
        // Safety: the pointer came from relight_enhancer_load and is
        // released exactly once.
        drop(unsafe { Box::from_raw(handle) });
    }
}

/// Number of trained scalars in the loaded model, 0 for NULL.
#[no_mangle]
pub extern "C" fn relight_enhancer_parameter_count(handle: *const RelightEnhancer) -> u64 {
    if handle.is_null() {
        return 0;
    }
    // Safety: non-null handle from relight_enhancer_load.
    unsafe { &*handle }.params.scalar_count() as u64
}

/// Enhances the image at `input_path` and writes a PNG to `output_path`.
/// Input dimensions are unrestricted; the image is padded internally.
#[no_mangle]
pub extern "C" fn relight_enhancer_enhance_file(
    handle: *const RelightEnhancer,
    input_path: *const c_char,
    output_path: *const c_char,
) -> RelightStatus {
    guarded(|| {
        if handle.is_null() {
            set_last_error("handle is NULL");
            return RelightStatus::NullArgument;
        }
        let (input, output) = match (
            path_arg(input_path, "input_path"),
            path_arg(output_path, "output_path"),
        ) {
            (Ok(i), Ok(o)) => (i, o),
            (Err(s), _) | (_, Err(s)) => return s,
        };
        // Safety: non-null handle from relight_enhancer_load.
        let h = unsafe { &*handle };
        let run = || -> Result<(), Error> {
            let img = load_image(input)?.to_rgb();
            let enhanced = enhance_padded(&img, &h.backend, &h.params, &h.meta.net)?;
            save_image(&enhanced.output, output)
        };
        match run() {
            Ok(()) => RelightStatus::Ok,
            Err(e) => fail(&e),
        }
    })
}

/// Splits the image at `input_path` into its illumination and reflectance
/// maps, written as PNGs. Needs no model.
#[no_mangle]
pub extern "C" fn relight_decompose_file(
    input_path: *const c_char,
    illumination_path: *const c_char,
    reflectance_path: *const c_char,
) -> RelightStatus {
    guarded(|| {
        let (input, illum, refl) = match (
            path_arg(input_path, "input_path"),
            path_arg(illumination_path, "illumination_path"),
            path_arg(reflectance_path, "reflectance_path"),
        ) {
            (Ok(a), Ok(b), Ok(c)) => (a, b, c),
            (Err(s), _, _) | (_, Err(s), _) | (_, _, Err(s)) => return s,
        };
        let run = || -> Result<(), Error> {
            let img = load_image(input)?.to_rgb();
            let parts = decompose(&img)?;
            save_image(&parts.illumination, illum)?;
            save_image(&parts.reflectance, refl)
        };
        match run() {
            Ok(()) => RelightStatus::Ok,
            Err(e) => fail(&e),
        }
    })
}

/// Description of the most recent failure on this thread. Valid until the
/// next API call from the same thread; never NULL.
#[no_mangle]
pub extern "C" fn relight_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Static name for a status code.
#[no_mangle]
pub extern "C" fn relight_status_message(status: RelightStatus) -> *const c_char {
    let msg: &'static CStr = match status {
        RelightStatus::Ok => c"ok",
        RelightStatus::NullArgument => c"null argument",
        RelightStatus::InvalidUtf8 => c"invalid utf-8 in argument",
        RelightStatus::Io => c"i/o error",
        RelightStatus::BadImage => c"image decode/encode error",
        RelightStatus::BadCheckpoint => c"malformed checkpoint",
        RelightStatus::InvalidInput => c"invalid input",
        RelightStatus::Panic => c"internal panic",
    };
    msg.as_ptr()
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn relight_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr() as *const c_char
}
