//! C interface: opaque network handles, status codes and a per-thread
//! last-error message.
//!
//! Every function returns an [`NnStatus`]. On failure the message can be
//! fetched with [`nn_last_error`]. Panics are caught at the boundary and
//! reported as [`NnStatus::Panic`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use nodulenet::cli::RunConfig;
use nodulenet::data::Volume;
use nodulenet::eval::{dice, froc, froc_score, sensitivity, FROC_RATES};
use nodulenet::model::{load_weights, save_weights, MultiTaskNet, NetworkConfig};
use nodulenet::{Error, Tensor};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NnStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Config = 4,
    Data = 5,
    UndefinedMetric = 6,
    Numeric = 7,
    Format = 8,
    Io = 9,
    Panic = 10,
}

/// Opaque network handle.
pub struct NnNet {
    net: MultiTaskNet,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> NnStatus {
    match e {
        Error::Shape(_) => NnStatus::Shape,
        Error::Config(_) => NnStatus::Config,
        Error::Usage(_) => NnStatus::InvalidArgument,
        Error::Data(_) | Error::Csv(_) => NnStatus::Data,
        Error::UndefinedMetric(_) => NnStatus::UndefinedMetric,
        Error::Numeric(_) => NnStatus::Numeric,
        Error::Format { .. } => NnStatus::Format,
        Error::Io { .. } => NnStatus::Io,
    }
}

struct Fail(NnStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(NnStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> NnStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            NnStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            NnStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(NnStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, n))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Network settings from a run configuration; null means defaults.
unsafe fn network_config(config_toml: *const c_char) -> Result<NetworkConfig, Fail> {
    let cfg = if config_toml.is_null() {
        RunConfig::default()
    } else {
        RunConfig::parse(str_arg(config_toml, "config_toml")?)?
    };
    Ok(cfg.effective()?.network)
}

/// Copies the message of the last failed call on this thread into `buf`,
/// NUL-terminated and truncated to `len` bytes. Returns the full message
/// length, excluding the terminator.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn nn_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Creates a freshly initialised network. `config_toml` is a run
/// configuration document or null for defaults.
///
/// # Safety
/// `config_toml` must be null or a NUL-terminated string; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn nn_net_create(config_toml: *const c_char, out: *mut *mut NnNet) -> NnStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let net = MultiTaskNet::new(&network_config(config_toml)?)?;
        *out = Box::into_raw(Box::new(NnNet { net }));
        Ok(())
    })
}

/// Loads a weights file written for the network described by
/// `config_toml` (null for defaults).
///
/// # Safety
/// String arguments must be null or NUL-terminated; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn nn_net_load(
    path: *const c_char,
    config_toml: *const c_char,
    out: *mut *mut NnNet,
) -> NnStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let path = str_arg(path, "path")?;
        let net = load_weights(Path::new(path), &network_config(config_toml)?)?;
        *out = Box::into_raw(Box::new(NnNet { net }));
        Ok(())
    })
}

/// # Safety
/// `net` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn nn_net_save(net: *const NnNet, path: *const c_char) -> NnStatus {
    guard(|| {
        let net = net.as_ref().ok_or_else(|| null("net"))?;
        let path = str_arg(path, "path")?;
        save_weights(&net.net, Path::new(path))?;
        Ok(())
    })
}

/// Writes the `(z, y, x)` patch extents the network expects.
///
/// # Safety
/// `net` must come from this library; `out` must hold 3 values.
#[no_mangle]
pub unsafe extern "C" fn nn_net_input_shape(net: *const NnNet, out: *mut usize) -> NnStatus {
    guard(|| {
        let net = net.as_ref().ok_or_else(|| null("net"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let shape = net.net.config().input_shape;
        ptr::copy_nonoverlapping(shape.as_ptr(), out, 3);
        Ok(())
    })
}

/// Runs inference on `n` patches stored back to back in `patches`
/// (row-major `z, y, x` each). Writes one nodule probability per patch to
/// `probs` and the thresholded masks, back to back, to `masks`.
///
/// # Safety
/// `patches` and `masks` must hold `n * z * y * x` values and `probs`
/// must hold `n`.
#[no_mangle]
pub unsafe extern "C" fn nn_net_predict(
    net: *const NnNet,
    patches: *const f32,
    n: usize,
    seg_threshold: f64,
    probs: *mut f64,
    masks: *mut u8,
) -> NnStatus {
    guard(|| {
        let net = net.as_ref().ok_or_else(|| null("net"))?;
        if n == 0 {
            return Err(Fail(NnStatus::InvalidArgument, "n must be positive".into()));
        }
        let [z, y, x] = net.net.config().input_shape;
        let per = z * y * x;
        let input = slice_arg(patches, n * per, "patches")?;
        if probs.is_null() {
            return Err(null("probs"));
        }
        if masks.is_null() {
            return Err(null("masks"));
        }
        let batch = Tensor::new(&[n, 1, z, y, x], input.iter().map(|&v| f64::from(v)).collect())?;
        let preds = net.net.predict(&batch, seg_threshold)?;
        let probs = slice::from_raw_parts_mut(probs, n);
        let masks = slice::from_raw_parts_mut(masks, n * per);
        for (i, p) in preds.iter().enumerate() {
            probs[i] = p.nodule_prob;
            masks[i * per..(i + 1) * per].copy_from_slice(&p.mask);
        }
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `net` must be null or come from this library and not be used again.
#[no_mangle]
pub unsafe extern "C" fn nn_net_free(net: *mut NnNet) {
    if !net.is_null() {
        drop(Box::from_raw(net));
    }
}

/// Dice overlap of two binary masks of `len` voxels; nonzero is foreground.
///
/// # Safety
/// `pred` and `truth` must hold `len` bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nn_dice(pred: *const u8, truth: *const u8, len: usize, out: *mut f64) -> NnStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let vol = |d: &[u8]| Volume {
            shape: [1, 1, d.len()],
            data: d.to_vec(),
        };
        *out = dice(&vol(slice_arg(pred, len, "pred")?), &vol(slice_arg(truth, len, "truth")?))?;
        Ok(())
    })
}

/// Share of true nodules (`labels[i] != 0`) with `scores[i] >= threshold`.
///
/// # Safety
/// `scores` and `labels` must hold `n` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn nn_sensitivity(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    threshold: f64,
    out: *mut f64,
) -> NnStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let labels: Vec<bool> = slice_arg(labels, n, "labels")?.iter().map(|&l| l != 0).collect();
        *out = sensitivity(slice_arg(scores, n, "scores")?, &labels, threshold)?;
        Ok(())
    })
}

/// Mean FROC sensitivity at 1/8, 1/4, 1/2, 1, 2, 4 and 8 false positives
/// per scan.
///
/// # Safety
/// `scores`, `labels` and `scan_ids` must hold `n` values; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn nn_froc_score(
    scores: *const f64,
    labels: *const u8,
    scan_ids: *const u32,
    n: usize,
    out: *mut f64,
) -> NnStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let labels: Vec<bool> = slice_arg(labels, n, "labels")?.iter().map(|&l| l != 0).collect();
        let curve = froc(
            slice_arg(scores, n, "scores")?,
            &labels,
            slice_arg(scan_ids, n, "scan_ids")?,
        )?;
        *out = froc_score(&curve, &FROC_RATES);
        Ok(())
    })
}
