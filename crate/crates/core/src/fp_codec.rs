//! Scalar minifloat codecs.
//!
//! Every element format used by the emulator (FP8 E4M3/E5M2, FP6 E2M3/E3M2
//! and bfloat16) is described by a [`FloatFormat`] and encoded/decoded with
//! exact integer arithmetic on the f64 representation of the input. The
//! shared block scale type E8M0 lives in [`ScaleFormat`].

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How NaN is represented in a format.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NanEncoding {
    /// `S 1..1 1..1` is NaN, the rest of the top exponent band is finite (E4M3).
    ReservedMaxCode,
    /// IEEE-754 style: all-ones exponent holds infinities and NaNs.
    IeeeLike,
    /// No NaN (FP6 formats).
    None,
}

/// Bit-level description of a minifloat element type.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FloatFormat {
    pub name: &'static str,
    pub exponent_bits: u32,
    pub mantissa_bits: u32,
    pub bias: i32,
    pub has_sign: bool,
    pub max_normal: f64,
    pub e_max_elem: i32,
    pub supports_subnormals: bool,
    pub nan_encoding: NanEncoding,
    pub has_infinity: bool,
}

impl FloatFormat {
    pub const E4M3: FloatFormat = FloatFormat {
        name: "e4m3",
        exponent_bits: 4,
        mantissa_bits: 3,
        bias: 7,
        has_sign: true,
        max_normal: 448.0,
        e_max_elem: 8,
        supports_subnormals: true,
        nan_encoding: NanEncoding::ReservedMaxCode,
        has_infinity: false,
    };

    pub const E5M2: FloatFormat = FloatFormat {
        name: "e5m2",
        exponent_bits: 5,
        mantissa_bits: 2,
        bias: 15,
        has_sign: true,
        max_normal: 57344.0,
        e_max_elem: 15,
        supports_subnormals: true,
        nan_encoding: NanEncoding::IeeeLike,
        has_infinity: true,
    };

    pub const E2M3: FloatFormat = FloatFormat {
        name: "e2m3",
        exponent_bits: 2,
        mantissa_bits: 3,
        bias: 1,
        has_sign: true,
        max_normal: 7.5,
        e_max_elem: 2,
        supports_subnormals: true,
        nan_encoding: NanEncoding::None,
        has_infinity: false,
    };

    pub const E3M2: FloatFormat = FloatFormat {
        name: "e3m2",
        exponent_bits: 3,
        mantissa_bits: 2,
        bias: 3,
        has_sign: true,
        max_normal: 28.0,
        e_max_elem: 4,
        supports_subnormals: true,
        nan_encoding: NanEncoding::None,
        has_infinity: false,
    };

    pub const BF16: FloatFormat = FloatFormat {
        name: "bf16",
        exponent_bits: 8,
        mantissa_bits: 7,
        bias: 127,
        has_sign: true,
        // (2 - 2^-7) * 2^127
        max_normal: 3.3895313892515355e38,
        e_max_elem: 127,
        supports_subnormals: true,
        nan_encoding: NanEncoding::IeeeLike,
        has_infinity: true,
    };

    /// Total code width in bits.
    pub const fn width(&self) -> u32 {
        self.has_sign as u32 + self.exponent_bits + self.mantissa_bits
    }

    /// Exponent of the smallest normal number.
    pub const fn min_normal_exp(&self) -> i32 {
        1 - self.bias
    }

    pub fn min_normal(&self) -> f64 {
        pow2(self.min_normal_exp())
    }

    pub fn min_subnormal(&self) -> f64 {
        pow2(self.min_normal_exp() - self.mantissa_bits as i32)
    }

    fn exp_mask(&self) -> u16 {
        ((1u32 << self.exponent_bits) - 1) as u16
    }

    fn mant_mask(&self) -> u16 {
        ((1u32 << self.mantissa_bits) - 1) as u16
    }

    fn sign_bit(&self) -> u16 {
        if self.has_sign {
            1 << (self.exponent_bits + self.mantissa_bits)
        } else {
            0
        }
    }

    fn assemble(&self, negative: bool, exp_field: u16, mant_field: u16) -> u16 {
        let sign = if negative { self.sign_bit() } else { 0 };
        sign | (exp_field << self.mantissa_bits) | mant_field
    }

    /// Positive max-normal code.
    pub fn max_code(&self) -> u16 {
        match self.nan_encoding {
            NanEncoding::ReservedMaxCode => self.assemble(false, self.exp_mask(), self.mant_mask() - 1),
            NanEncoding::IeeeLike => self.assemble(false, self.exp_mask() - 1, self.mant_mask()),
            NanEncoding::None => self.assemble(false, self.exp_mask(), self.mant_mask()),
        }
    }

    /// Canonical (positive) NaN code, if the format has one.
    pub fn nan_code(&self) -> Option<u16> {
        match self.nan_encoding {
            NanEncoding::ReservedMaxCode => Some(self.assemble(false, self.exp_mask(), self.mant_mask())),
            NanEncoding::IeeeLike => {
                Some(self.assemble(false, self.exp_mask(), 1 << (self.mantissa_bits - 1)))
            }
            NanEncoding::None => None,
        }
    }

    fn infinity_code(&self, negative: bool) -> Option<u16> {
        self.has_infinity
            .then(|| self.assemble(negative, self.exp_mask(), 0))
    }
}

/// Identifier of a supported element format.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum ElementFormat {
    E4M3,
    E5M2,
    E2M3,
    E3M2,
    Bf16,
}

impl ElementFormat {
    pub const ALL: [ElementFormat; 5] = [
        ElementFormat::E4M3,
        ElementFormat::E5M2,
        ElementFormat::E2M3,
        ElementFormat::E3M2,
        ElementFormat::Bf16,
    ];

    pub fn descriptor(self) -> &'static FloatFormat {
        match self {
            ElementFormat::E4M3 => &FloatFormat::E4M3,
            ElementFormat::E5M2 => &FloatFormat::E5M2,
            ElementFormat::E2M3 => &FloatFormat::E2M3,
            ElementFormat::E3M2 => &FloatFormat::E3M2,
            ElementFormat::Bf16 => &FloatFormat::BF16,
        }
    }

    pub fn name(self) -> &'static str {
        self.descriptor().name
    }
}

impl fmt::Display for ElementFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ElementFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "e4m3" | "fp8_e4m3" | "mxfp8_e4m3" => Ok(ElementFormat::E4M3),
            "e5m2" | "fp8_e5m2" | "mxfp8_e5m2" => Ok(ElementFormat::E5M2),
            "e2m3" | "fp6_e2m3" | "mxfp6_e2m3" => Ok(ElementFormat::E2M3),
            "e3m2" | "fp6_e3m2" | "mxfp6_e3m2" => Ok(ElementFormat::E3M2),
            "bf16" | "bfloat16" => Ok(ElementFormat::Bf16),
            other => Err(Error::invalid(format!("unknown element format `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoundingMode {
    #[default]
    NearestEven,
    TowardZero,
}

/// Knobs for [`encode_with`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncodeOptions {
    pub rounding: RoundingMode,
    pub saturate: bool,
    pub flush_subnormals: bool,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        EncodeOptions {
            rounding: RoundingMode::NearestEven,
            saturate: true,
            flush_subnormals: false,
        }
    }
}

/// A code of some element format.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CodeWord {
    pub bits: u16,
    pub format: ElementFormat,
}

impl CodeWord {
    pub fn new(bits: u16, format: ElementFormat) -> Result<Self> {
        let width = format.descriptor().width();
        if u32::from(bits) >> width != 0 {
            return Err(Error::invalid(format!(
                "code {bits:#x} does not fit in {width} bits of {format}"
            )));
        }
        Ok(CodeWord { bits, format })
    }

    pub fn decode(self) -> f64 {
        decode_bits(self.bits, self.format.descriptor())
    }

    pub fn is_nan(self) -> bool {
        self.decode().is_nan()
    }

    /// Binary string of exactly `width` digits.
    pub fn bit_string(self) -> String {
        let width = self.format.descriptor().width() as usize;
        format!("{:0width$b}", self.bits, width = width)
    }
}

/// Exact `2^k` for any `k` in the f64 range (subnormals included).
pub fn pow2(k: i32) -> f64 {
    if k >= -1022 {
        assert!(k <= 1023, "2^{k} overflows f64");
        f64::from_bits(((k + 1023) as u64) << 52)
    } else {
        assert!(k >= -1074, "2^{k} underflows f64");
        f64::from_bits(1u64 << (k + 1074))
    }
}

/// `floor(log2(|x|))` computed exactly from the bit pattern. `x` must be finite and nonzero.
pub fn floor_log2(x: f64) -> i32 {
    debug_assert!(x.is_finite() && x != 0.0);
    let bits = x.abs().to_bits();
    let exp_field = (bits >> 52) as i32;
    if exp_field == 0 {
        let mant = bits & ((1u64 << 52) - 1);
        -1074 + (63 - mant.leading_zeros() as i32)
    } else {
        exp_field - 1023
    }
}

/// Encode with nearest/toward-zero rounding and the given overflow policy.
pub fn encode_scalar(
    value: f64,
    format: ElementFormat,
    rounding: RoundingMode,
    saturate: bool,
) -> Result<CodeWord> {
    encode_with(
        value,
        format,
        EncodeOptions {
            rounding,
            saturate,
            flush_subnormals: false,
        },
    )
}

pub fn encode_with(value: f64, format: ElementFormat, opts: EncodeOptions) -> Result<CodeWord> {
    let bits = encode_bits(value, format.descriptor(), opts)?;
    Ok(CodeWord { bits, format })
}

pub fn decode_scalar(code: CodeWord) -> f64 {
    code.decode()
}

pub(crate) fn encode_bits(value: f64, fmt: &FloatFormat, opts: EncodeOptions) -> Result<u16> {
    if value.is_nan() {
        return fmt.nan_code().ok_or_else(|| {
            Error::invalid(format!("NaN cannot be encoded in {}", fmt.name))
        });
    }
    let negative = value.is_sign_negative() && fmt.has_sign;
    let mag = value.abs();
    let max_code = fmt.max_code() | if negative { fmt.sign_bit() } else { 0 };

    if mag.is_infinite() {
        if opts.saturate {
            return Ok(max_code);
        }
        return fmt.infinity_code(negative).ok_or_else(|| {
            Error::invalid(format!("infinity cannot be encoded in {} without saturation", fmt.name))
        });
    }
    if mag == 0.0 {
        return Ok(fmt.assemble(negative, 0, 0));
    }

    let m = fmt.mantissa_bits as i32;
    let emin = fmt.min_normal_exp();
    let mut e = floor_log2(mag).max(emin);
    // mag / quantum is exact: dividing by a power of two within range
    let q = mag / pow2(e - m);
    let rounded = match opts.rounding {
        RoundingMode::NearestEven => q.round_ties_even(),
        RoundingMode::TowardZero => q.trunc(),
    };
    let mut n = rounded as u64;
    let hidden = 1u64 << m;
    if n == 2 * hidden {
        e += 1;
        n = hidden;
    }
    if n == 0 {
        return Ok(fmt.assemble(negative, 0, 0));
    }

    let magnitude = n as f64 * pow2(e - m);
    if magnitude > fmt.max_normal {
        if opts.saturate {
            return Ok(max_code);
        }
        return Ok(match fmt.nan_encoding {
            NanEncoding::ReservedMaxCode => fmt.nan_code().unwrap() | if negative { fmt.sign_bit() } else { 0 },
            NanEncoding::IeeeLike => fmt.infinity_code(negative).unwrap_or(max_code),
            NanEncoding::None => max_code,
        });
    }

    if n < hidden {
        // subnormal, only reachable with e == emin
        if opts.flush_subnormals || !fmt.supports_subnormals {
            return Ok(fmt.assemble(negative, 0, 0));
        }
        return Ok(fmt.assemble(negative, 0, n as u16));
    }
    let exp_field = (e + fmt.bias) as u16;
    Ok(fmt.assemble(negative, exp_field, (n - hidden) as u16))
}

pub(crate) fn decode_bits(bits: u16, fmt: &FloatFormat) -> f64 {
    let m = fmt.mantissa_bits;
    let mant = bits & fmt.mant_mask();
    let exp_field = (bits >> m) & fmt.exp_mask();
    let negative = bits & fmt.sign_bit() != 0;

    let top = exp_field == fmt.exp_mask();
    let magnitude = match fmt.nan_encoding {
        NanEncoding::ReservedMaxCode if top && mant == fmt.mant_mask() => return f64::NAN,
        NanEncoding::IeeeLike if top => {
            if mant == 0 {
                f64::INFINITY
            } else {
                return f64::NAN;
            }
        }
        _ => {
            if exp_field == 0 {
                mant as f64 * pow2(fmt.min_normal_exp() - m as i32)
            } else {
                ((1u64 << m) + mant as u64) as f64 * pow2(exp_field as i32 - fmt.bias - m as i32)
            }
        }
    };
    if negative {
        -magnitude
    } else {
        magnitude
    }
}

/// Round `value` to the nearest value representable in `format` (saturating).
pub fn round_to_format(value: f64, format: ElementFormat, opts: EncodeOptions) -> Result<f64> {
    let fmt = format.descriptor();
    Ok(decode_bits(encode_bits(value, fmt, opts)?, fmt))
}

/// Value-level equivalent of `decode(encode(value))` with saturation, for
/// finite `value`. Skips code assembly; used on the fake-quantization hot
/// path.
#[inline]
pub fn saturating_round(value: f64, fmt: &FloatFormat, rounding: RoundingMode, flush_subnormals: bool) -> f64 {
    debug_assert!(value.is_finite());
    let mag = value.abs();
    if mag == 0.0 {
        return if fmt.has_sign { value } else { 0.0 };
    }
    let m = fmt.mantissa_bits as i32;
    let emin = fmt.min_normal_exp();
    let e = floor_log2(mag).max(emin);
    let quantum = pow2(e - m);
    let q = mag / quantum;
    let n = match rounding {
        RoundingMode::NearestEven => q.round_ties_even(),
        RoundingMode::TowardZero => q.trunc(),
    };
    let mut r = n * quantum;
    if r > fmt.max_normal {
        r = fmt.max_normal;
    } else if r < fmt.min_normal() && (flush_subnormals || !fmt.supports_subnormals) {
        r = 0.0;
    }
    if value.is_sign_negative() && fmt.has_sign {
        -r
    } else {
        r
    }
}

/// bfloat16 rounding of an f32 (nearest-even, overflow to infinity, NaN kept).
pub fn bf16_round_f32(x: f32) -> f32 {
    if x.is_nan() {
        return x;
    }
    let bits = x.to_bits();
    let lsb = (bits >> 16) & 1;
    let rounded = bits.wrapping_add(0x7FFF + lsb) & 0xFFFF_0000;
    f32::from_bits(rounded)
}

/// bfloat16 rounding of an f64 without double rounding.
pub fn bf16_round_f64(x: f64) -> f64 {
    if !x.is_finite() {
        return x;
    }
    let opts = EncodeOptions {
        saturate: false,
        ..EncodeOptions::default()
    };
    // infallible: bf16 has NaN and infinities
    round_to_format(x, ElementFormat::Bf16, opts).unwrap_or(f64::NAN)
}

/// One row of a code table.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CodeEntry {
    pub index: usize,
    pub code: CodeWord,
    pub value: f64,
}

/// All positive finite nonzero codes, ascending by value.
pub fn enumerate_codes(format: ElementFormat) -> Vec<CodeEntry> {
    let fmt = format.descriptor();
    let positive_codes = 1u32 << (fmt.exponent_bits + fmt.mantissa_bits);
    let mut entries: Vec<(u16, f64)> = (1..positive_codes)
        .map(|b| b as u16)
        .map(|b| (b, decode_bits(b, fmt)))
        .filter(|(_, v)| v.is_finite())
        .collect();
    entries.sort_by(|a, b| a.1.total_cmp(&b.1));
    entries
        .into_iter()
        .enumerate()
        .map(|(index, (bits, value))| CodeEntry {
            index,
            code: CodeWord { bits, format },
            value,
        })
        .collect()
}

/// `(value[i+1] - value[i]) / value[i]` over the positive code list.
pub fn relative_gaps(format: ElementFormat) -> Vec<(usize, f64)> {
    let codes = enumerate_codes(format);
    codes
        .windows(2)
        .map(|w| (w[0].index, (w[1].value - w[0].value) / w[0].value))
        .collect()
}

/// Write the code table as CSV: `index,bits,value,relative_gap`.
pub fn write_code_table<W: Write>(format: ElementFormat, mut out: W) -> std::io::Result<()> {
    let codes = enumerate_codes(format);
    let gaps = relative_gaps(format);
    writeln!(out, "index,bits,value,relative_gap")?;
    for entry in &codes {
        let gap = gaps
            .get(entry.index)
            .map(|(_, g)| format!("{g}"))
            .unwrap_or_default();
        writeln!(
            out,
            "{},{},{},{}",
            entry.index,
            entry.code.bit_string(),
            entry.value,
            gap
        )?;
    }
    Ok(())
}

/// E8M0 shared-scale format: an 8-bit biased exponent, `0xFF` is NaN.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScaleFormat;

impl ScaleFormat {
    pub const EXPONENT_BITS: u32 = 8;
    pub const BIAS: i32 = 127;
    pub const NAN_CODE: u8 = 0xFF;
    pub const MIN_EXP: i32 = -127;
    pub const MAX_EXP: i32 = 127;

    pub fn encode(exp: i32) -> Result<u8> {
        if !(Self::MIN_EXP..=Self::MAX_EXP).contains(&exp) {
            return Err(Error::invalid(format!("scale exponent {exp} outside E8M0 range")));
        }
        Ok((exp + Self::BIAS) as u8)
    }

    /// `None` for the NaN code.
    pub fn decode(byte: u8) -> Option<i32> {
        (byte != Self::NAN_CODE).then_some(byte as i32 - Self::BIAS)
    }

    pub fn value(exp: i32) -> f64 {
        pow2(exp)
    }
}
