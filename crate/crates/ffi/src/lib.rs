//! C interface to the mxlab codecs, MX quantizer and analysis routines.
//!
//! Every fallible function returns an `MxlabStatus`; on failure a message
//! is available from `mxlab_last_error` on the same thread. Specs are
//! opaque handles created with `mxlab_spec_new` and released with
//! `mxlab_spec_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use mxlab::diagnostics::{detect_spikes, stability_margin};
use mxlab::error::Error;
use mxlab::fp_codec::{decode_scalar, encode_scalar, CodeWord, ElementFormat, RoundingMode};
use mxlab::mx_block::{dequantize_block, fake_quantize, last_bin_fraction, quantize_block, MxSpec};
use mxlab::scaling::{fit_scaling_law, ScalingPoint};

pub type MxlabStatus = i32;

pub const MXLAB_OK: MxlabStatus = 0;
pub const MXLAB_ERR_NULL_POINTER: MxlabStatus = 1;
pub const MXLAB_ERR_INVALID_INPUT: MxlabStatus = 2;
pub const MXLAB_ERR_NON_FINITE: MxlabStatus = 3;
pub const MXLAB_ERR_SHAPE: MxlabStatus = 4;
pub const MXLAB_ERR_UNDEFINED_RATIO: MxlabStatus = 5;
pub const MXLAB_ERR_ILL_POSED_FIT: MxlabStatus = 6;
pub const MXLAB_ERR_BUFFER_TOO_SMALL: MxlabStatus = 7;
pub const MXLAB_ERR_PANIC: MxlabStatus = 8;

pub const MXLAB_FORMAT_E4M3: u32 = 0;
pub const MXLAB_FORMAT_E5M2: u32 = 1;
pub const MXLAB_FORMAT_E2M3: u32 = 2;
pub const MXLAB_FORMAT_E3M2: u32 = 3;
pub const MXLAB_FORMAT_BF16: u32 = 4;

pub const MXLAB_ROUND_NEAREST_EVEN: u32 = 0;
pub const MXLAB_ROUND_TOWARD_ZERO: u32 = 1;

/// Opaque MX quantization spec.
pub struct MxlabSpec {
    inner: MxSpec,
}

/// Fitted `L(N, D) = E + A / N^alpha + B / D^beta`.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MxlabScalingFit {
    pub a_coef: f64,
    pub b_coef: f64,
    pub e: f64,
    pub alpha: f64,
    pub beta: f64,
    /// `beta / (alpha + beta)`
    pub allocation_exponent: f64,
    pub objective: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

fn status_of(e: &Error) -> MxlabStatus {
    match e {
        Error::NonFinite { .. } | Error::NonFiniteOperand { .. } => MXLAB_ERR_NON_FINITE,
        Error::ShapeMismatch(_) => MXLAB_ERR_SHAPE,
        Error::UndefinedRatio(_) => MXLAB_ERR_UNDEFINED_RATIO,
        Error::IllPosedFit(_) => MXLAB_ERR_ILL_POSED_FIT,
        _ => MXLAB_ERR_INVALID_INPUT,
    }
}

/// Run `f`, translating errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), MxlabStatusError>) -> MxlabStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            MXLAB_OK
        }
        Ok(Err(e)) => {
            set_error(e.message);
            e.status
        }
        Err(_) => {
            set_error("internal panic");
            MXLAB_ERR_PANIC
        }
    }
}

struct MxlabStatusError {
    status: MxlabStatus,
    message: String,
}

impl From<Error> for MxlabStatusError {
    fn from(e: Error) -> Self {
        MxlabStatusError {
            status: status_of(&e),
            message: e.to_string(),
        }
    }
}

fn fail(status: MxlabStatus, message: &str) -> MxlabStatusError {
    MxlabStatusError {
        status,
        message: message.to_string(),
    }
}

fn null(what: &str) -> MxlabStatusError {
    fail(MXLAB_ERR_NULL_POINTER, &format!("{what} is null"))
}

fn format_of(id: u32) -> Result<ElementFormat, MxlabStatusError> {
    Ok(match id {
        MXLAB_FORMAT_E4M3 => ElementFormat::E4M3,
        MXLAB_FORMAT_E5M2 => ElementFormat::E5M2,
        MXLAB_FORMAT_E2M3 => ElementFormat::E2M3,
        MXLAB_FORMAT_E3M2 => ElementFormat::E3M2,
        MXLAB_FORMAT_BF16 => ElementFormat::Bf16,
        _ => return Err(fail(MXLAB_ERR_INVALID_INPUT, &format!("unknown format id {id}"))),
    })
}

fn rounding_of(id: u32) -> Result<RoundingMode, MxlabStatusError> {
    match id {
        MXLAB_ROUND_NEAREST_EVEN => Ok(RoundingMode::NearestEven),
        MXLAB_ROUND_TOWARD_ZERO => Ok(RoundingMode::TowardZero),
        _ => Err(fail(MXLAB_ERR_INVALID_INPUT, &format!("unknown rounding id {id}"))),
    }
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], MxlabStatusError> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, what: &str) -> Result<&'a mut [T], MxlabStatusError> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

unsafe fn spec_ref<'a>(spec: *const MxlabSpec) -> Result<&'a MxSpec, MxlabStatusError> {
    spec.as_ref().map(|s| &s.inner).ok_or_else(|| null("spec"))
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn mxlab_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mxlab_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Create a spec for element format `format` (an `MXLAB_FORMAT_*` id) with
/// block size `block_size` and nearest-even rounding.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn mxlab_spec_new(format: u32, block_size: usize, out: *mut *mut MxlabSpec) -> MxlabStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let spec = MxSpec::new(format_of(format)?).with_block_size(block_size);
        spec.validate()?;
        *out = Box::into_raw(Box::new(MxlabSpec { inner: spec }));
        Ok(())
    })
}

/// Create a spec from a format name such as `e4m3` or `mxfp8-e4m3`.
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mxlab_spec_from_name(name: *const c_char, block_size: usize, out: *mut *mut MxlabSpec) -> MxlabStatus {
    guard(|| {
        if name.is_null() {
            return Err(null("name"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let name = CStr::from_ptr(name)
            .to_str()
            .map_err(|_| fail(MXLAB_ERR_INVALID_INPUT, "name is not UTF-8"))?;
        let fmt: ElementFormat = name.parse()?;
        let spec = MxSpec::new(fmt).with_block_size(block_size);
        spec.validate()?;
        *out = Box::into_raw(Box::new(MxlabSpec { inner: spec }));
        Ok(())
    })
}

/// Release a spec. Null is ignored.
///
/// # Safety
/// `spec` must come from `mxlab_spec_new` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mxlab_spec_free(spec: *mut MxlabSpec) {
    if !spec.is_null() {
        drop(Box::from_raw(spec));
    }
}

/// Set the rounding mode (`MXLAB_ROUND_*`).
///
/// # Safety
/// `spec` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mxlab_spec_set_rounding(spec: *mut MxlabSpec, rounding: u32) -> MxlabStatus {
    guard(|| {
        let s = spec.as_mut().ok_or_else(|| null("spec"))?;
        s.inner.rounding = rounding_of(rounding)?;
        Ok(())
    })
}

/// Set the shared-exponent offset (0 or 1). With `conditional` nonzero the
/// offset only applies to blocks that would otherwise overflow.
///
/// # Safety
/// `spec` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn mxlab_spec_set_exponent_offset(spec: *mut MxlabSpec, offset: i32, conditional: bool) -> MxlabStatus {
    guard(|| {
        let s = spec.as_mut().ok_or_else(|| null("spec"))?;
        let mut next = s.inner;
        next.exponent_offset = offset;
        next.conditional_offset = conditional;
        next.validate()?;
        s.inner = next;
        Ok(())
    })
}

/// Encode one value; the code is written to `out_bits`.
///
/// # Safety
/// `out_bits` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mxlab_encode_scalar(
    value: f64,
    format: u32,
    rounding: u32,
    saturate: bool,
    out_bits: *mut u16,
) -> MxlabStatus {
    guard(|| {
        if out_bits.is_null() {
            return Err(null("out_bits"));
        }
        let code = encode_scalar(value, format_of(format)?, rounding_of(rounding)?, saturate)?;
        *out_bits = code.bits;
        Ok(())
    })
}

/// Decode one code; NaN codes decode to NaN.
///
/// # Safety
/// `out_value` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mxlab_decode_scalar(bits: u16, format: u32, out_value: *mut f64) -> MxlabStatus {
    guard(|| {
        if out_value.is_null() {
            return Err(null("out_value"));
        }
        let code = CodeWord::new(bits, format_of(format)?)?;
        *out_value = decode_scalar(code);
        Ok(())
    })
}

/// Quantize up to `block_size` values into one block. Writes the shared
/// exponent and `len` codes.
///
/// # Safety
/// `values` and `out_codes` must hold `len` elements; `out_shared_exp`
/// must be writable.
#[no_mangle]
pub unsafe extern "C" fn mxlab_quantize_block(
    spec: *const MxlabSpec,
    values: *const f64,
    len: usize,
    out_shared_exp: *mut i32,
    out_codes: *mut u16,
) -> MxlabStatus {
    guard(|| {
        let spec = spec_ref(spec)?;
        let values = slice(values, len, "values")?;
        let codes = slice_mut(out_codes, len, "out_codes")?;
        if out_shared_exp.is_null() {
            return Err(null("out_shared_exp"));
        }
        let block = quantize_block(values, spec)?;
        *out_shared_exp = block.shared_exp;
        for (dst, c) in codes.iter_mut().zip(&block.codes) {
            *dst = c.bits;
        }
        Ok(())
    })
}

/// Decode a block of `len` codes with the given shared exponent.
///
/// # Safety
/// `codes` and `out_values` must hold `len` elements.
#[no_mangle]
pub unsafe extern "C" fn mxlab_dequantize_block(
    spec: *const MxlabSpec,
    shared_exp: i32,
    codes: *const u16,
    len: usize,
    out_values: *mut f64,
) -> MxlabStatus {
    guard(|| {
        let spec = spec_ref(spec)?;
        let codes = slice(codes, len, "codes")?;
        let out = slice_mut(out_values, len, "out_values")?;
        if len > spec.block_size {
            return Err(fail(MXLAB_ERR_INVALID_INPUT, "more codes than the block size"));
        }
        let words = codes
            .iter()
            .map(|&b| CodeWord::new(b, spec.element))
            .collect::<Result<Vec<_>, _>>()?;
        let block = mxlab::mx_block::MxBlock {
            shared_exp,
            codes: words,
            valid_len: len,
        };
        out.copy_from_slice(&dequantize_block(&block, spec));
        Ok(())
    })
}

/// Quantize and dequantize a row-major `rows x cols` f32 matrix in place,
/// blocking along `axis` (0 or 1). Writes the last-bin fraction if
/// `out_last_bin` is non-null.
///
/// # Safety
/// `data` must hold `rows * cols` elements.
#[no_mangle]
pub unsafe extern "C" fn mxlab_fake_quantize_f32(
    spec: *const MxlabSpec,
    data: *mut f32,
    rows: usize,
    cols: usize,
    axis: usize,
    out_last_bin: *mut f64,
) -> MxlabStatus {
    guard(|| {
        let spec = spec_ref(spec)?;
        let n = rows.checked_mul(cols).ok_or_else(|| fail(MXLAB_ERR_SHAPE, "size overflow"))?;
        let data = slice_mut(data, n, "data")?;
        let stats = fake_quantize(data, &[rows, cols], axis, spec)?;
        if !out_last_bin.is_null() {
            *out_last_bin = stats.fraction();
        }
        Ok(())
    })
}

/// Fraction of elements of a `rows x cols` matrix landing on the largest
/// code of the element format.
///
/// # Safety
/// `data` must hold `rows * cols` elements; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mxlab_last_bin_fraction(
    spec: *const MxlabSpec,
    data: *const f64,
    rows: usize,
    cols: usize,
    axis: usize,
    out: *mut f64,
) -> MxlabStatus {
    guard(|| {
        let spec = spec_ref(spec)?;
        let n = rows.checked_mul(cols).ok_or_else(|| fail(MXLAB_ERR_SHAPE, "size overflow"))?;
        let data = slice(data, n, "data")?;
        if out.is_null() {
            return Err(null("out"));
        }
        *out = last_bin_fraction(data, &[rows, cols], spec, axis)?;
        Ok(())
    })
}

/// Indices `t` with `losses[t] > factor * losses[t-1]`. Up to `capacity`
/// indices are written to `out_steps`; `out_count` always receives the
/// total, and `MXLAB_ERR_BUFFER_TOO_SMALL` is returned if it exceeds
/// `capacity`.
///
/// # Safety
/// `losses` must hold `len` values, `out_steps` `capacity` slots.
#[no_mangle]
pub unsafe extern "C" fn mxlab_detect_spikes(
    losses: *const f64,
    len: usize,
    factor: f64,
    out_steps: *mut usize,
    capacity: usize,
    out_count: *mut usize,
) -> MxlabStatus {
    guard(|| {
        let losses = slice(losses, len, "losses")?;
        let steps = slice_mut(out_steps, capacity, "out_steps")?;
        if out_count.is_null() {
            return Err(null("out_count"));
        }
        let report = detect_spikes(losses, factor)?;
        *out_count = report.spike_steps.len();
        for (dst, s) in steps.iter_mut().zip(&report.spike_steps) {
            *dst = *s;
        }
        if report.spike_steps.len() > capacity {
            return Err(fail(MXLAB_ERR_BUFFER_TOO_SMALL, "spike buffer too small"));
        }
        Ok(())
    })
}

/// `|1 - eta * lambda_max| + eta * zeta_lower * lambda_max`.
#[no_mangle]
pub extern "C" fn mxlab_stability_margin(eta: f64, lambda_max: f64, zeta_lower: f64) -> f64 {
    stability_margin(eta, lambda_max, zeta_lower)
}

/// Fit the scaling law to `len` points given as parallel arrays.
///
/// # Safety
/// `n`, `d` and `loss` must hold `len` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mxlab_fit_scaling_law(
    n: *const f64,
    d: *const f64,
    loss: *const f64,
    len: usize,
    huber_delta: f64,
    out: *mut MxlabScalingFit,
) -> MxlabStatus {
    guard(|| {
        let (n, d, loss) = (slice(n, len, "n")?, slice(d, len, "d")?, slice(loss, len, "loss")?);
        if out.is_null() {
            return Err(null("out"));
        }
        let pts: Vec<ScalingPoint> = (0..len)
            .map(|i| ScalingPoint {
                n: n[i],
                d: d[i],
                loss: loss[i],
            })
            .collect();
        let fit = fit_scaling_law(&pts, huber_delta)?;
        *out = MxlabScalingFit {
            a_coef: fit.A,
            b_coef: fit.B,
            e: fit.E,
            alpha: fit.alpha,
            beta: fit.beta,
            allocation_exponent: fit.a,
            objective: fit.objective,
        };
        Ok(())
    })
}
