//! MX block conversion: a shared E8M0 power-of-two scale per block of `k`
//! values plus one element code per value.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fp_codec::{
    encode_bits, floor_log2, pow2, saturating_round, CodeWord, ElementFormat, EncodeOptions,
    RoundingMode, ScaleFormat,
};
use crate::real::Real;

pub const DEFAULT_BLOCK_SIZE: usize = 32;

fn default_block_size() -> usize {
    DEFAULT_BLOCK_SIZE
}

/// Element format, block size and scale policy of an MX quantizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MxSpec {
    pub element: ElementFormat,
    #[serde(default = "default_block_size")]
    pub block_size: usize,
    #[serde(default)]
    pub rounding: RoundingMode,
    /// Added to every shared exponent (0 or 1).
    #[serde(default)]
    pub exponent_offset: i32,
    /// Apply `exponent_offset` only to blocks that would otherwise clamp.
    #[serde(default)]
    pub conditional_offset: bool,
    #[serde(default)]
    pub flush_subnormals: bool,
}

impl MxSpec {
    pub fn new(element: ElementFormat) -> Self {
        MxSpec {
            element,
            block_size: DEFAULT_BLOCK_SIZE,
            rounding: RoundingMode::NearestEven,
            exponent_offset: 0,
            conditional_offset: false,
            flush_subnormals: false,
        }
    }

    pub fn with_block_size(mut self, k: usize) -> Self {
        self.block_size = k;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 {
            return Err(Error::invalid("block size must be at least 1"));
        }
        if !(0..=1).contains(&self.exponent_offset) {
            return Err(Error::invalid(format!(
                "exponent offset must be 0 or 1, got {}",
                self.exponent_offset
            )));
        }
        Ok(())
    }

    fn encode_options(&self) -> EncodeOptions {
        EncodeOptions {
            rounding: self.rounding,
            saturate: true,
            flush_subnormals: self.flush_subnormals,
        }
    }
}

/// One shared scale `2^shared_exp` plus `k` element codes (zero padded).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MxBlock {
    pub shared_exp: i32,
    pub codes: Vec<CodeWord>,
    /// Number of leading codes that carry data.
    pub valid_len: usize,
}

fn clamp_scale_exp(exp: i32) -> i32 {
    if !(ScaleFormat::MIN_EXP..=ScaleFormat::MAX_EXP).contains(&exp) {
        log::warn!("shared exponent {exp} clamped to the E8M0 range");
    }
    exp.clamp(ScaleFormat::MIN_EXP, ScaleFormat::MAX_EXP)
}

fn base_exponent(absmax: f64, spec: &MxSpec) -> i32 {
    if absmax == 0.0 {
        ScaleFormat::MIN_EXP
    } else {
        floor_log2(absmax) - spec.element.descriptor().e_max_elem
    }
}

/// Shared exponent of a block whose largest magnitude is `absmax`, with the
/// offset policy of `spec` applied.
fn block_exponent(absmax: f64, spec: &MxSpec) -> i32 {
    if absmax == 0.0 {
        return ScaleFormat::MIN_EXP;
    }
    let base = base_exponent(absmax, spec);
    let offset = if spec.conditional_offset {
        let max_normal = spec.element.descriptor().max_normal;
        let ratio = absmax / pow2(clamp_scale_exp(base));
        let clamps = ratio > max_normal;
        if clamps {
            spec.exponent_offset
        } else {
            0
        }
    } else {
        spec.exponent_offset
    };
    clamp_scale_exp(base + offset)
}

fn check_finite(values: &[f64], base_index: usize) -> Result<f64> {
    let mut absmax = 0.0f64;
    for (i, &v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                index: base_index + i,
                value: v,
            });
        }
        absmax = absmax.max(v.abs());
    }
    Ok(absmax)
}

/// `floor(log2(max |V_i|)) - e_max_elem + offset`, clamped to E8M0.
pub fn compute_shared_exponent(values: &[f64], spec: &MxSpec) -> Result<i32> {
    if values.is_empty() {
        return Err(Error::invalid("cannot compute a shared exponent of an empty block"));
    }
    let absmax = check_finite(values, 0)?;
    Ok(block_exponent(absmax, spec))
}

pub fn quantize_block(values: &[f64], spec: &MxSpec) -> Result<MxBlock> {
    spec.validate()?;
    if values.len() > spec.block_size {
        return Err(Error::invalid(format!(
            "block of {} values exceeds block size {}",
            values.len(),
            spec.block_size
        )));
    }
    let shared_exp = compute_shared_exponent(values, spec)?;
    let scale = pow2(shared_exp);
    let fmt = spec.element.descriptor();
    let opts = spec.encode_options();
    let mut codes = Vec::with_capacity(spec.block_size);
    for &v in values {
        let bits = encode_bits(v / scale, fmt, opts)?;
        codes.push(CodeWord {
            bits,
            format: spec.element,
        });
    }
    codes.resize(
        spec.block_size,
        CodeWord {
            bits: 0,
            format: spec.element,
        },
    );
    Ok(MxBlock {
        shared_exp,
        codes,
        valid_len: values.len(),
    })
}

pub fn dequantize_block(block: &MxBlock, _spec: &MxSpec) -> Vec<f64> {
    let scale = pow2(block.shared_exp);
    block.codes[..block.valid_len]
        .iter()
        .map(|c| c.decode() * scale)
        .collect()
}

/// Whether `v` lands beyond the element max normal once divided by the
/// scale its block (with maximum magnitude `block_absmax`) would receive.
pub fn overflow_predicate(v: f64, block_absmax: f64, spec: &MxSpec) -> bool {
    if block_absmax == 0.0 || !block_absmax.is_finite() || !v.is_finite() {
        return false;
    }
    let exp = block_exponent(block_absmax, spec);
    v.abs() / pow2(exp) > spec.element.descriptor().max_normal
}

/// Tensor split into MX blocks along one axis.
#[derive(Clone, Debug, PartialEq)]
pub struct MxTensor {
    pub shape: Vec<usize>,
    pub axis: usize,
    pub spec: MxSpec,
    /// Row-major over the non-blocked dimensions, then block index along the axis.
    pub blocks: Vec<MxBlock>,
    /// Valid elements in the final block of each row.
    pub tail_len: usize,
}

impl MxTensor {
    pub fn blocks_per_row(&self) -> usize {
        self.shape[self.axis].div_ceil(self.spec.block_size)
    }
}

/// Strided view geometry: `outer` rows of `len` elements along the axis,
/// each element `inner` apart.
#[derive(Clone, Copy, Debug)]
struct AxisLayout {
    outer: usize,
    len: usize,
    inner: usize,
}

impl AxisLayout {
    fn new(shape: &[usize], axis: usize) -> Result<Self> {
        if axis >= shape.len() {
            return Err(Error::invalid(format!(
                "axis {axis} out of range for shape {shape:?}"
            )));
        }
        Ok(AxisLayout {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        })
    }

    fn index(&self, o: usize, j: usize, i: usize) -> usize {
        (o * self.len + j) * self.inner + i
    }
}

fn check_shape(data_len: usize, shape: &[usize]) -> Result<()> {
    let expected: usize = shape.iter().product();
    if expected != data_len {
        return Err(Error::ShapeMismatch(format!(
            "shape {shape:?} needs {expected} elements, got {data_len}"
        )));
    }
    Ok(())
}

pub fn quantize_tensor(data: &[f64], shape: &[usize], spec: &MxSpec, axis: usize) -> Result<MxTensor> {
    spec.validate()?;
    check_shape(data.len(), shape)?;
    let layout = AxisLayout::new(shape, axis)?;
    let k = spec.block_size;
    let mut blocks = Vec::new();
    let mut buf = Vec::with_capacity(k);
    for o in 0..layout.outer {
        for i in 0..layout.inner {
            for start in (0..layout.len).step_by(k) {
                buf.clear();
                let end = (start + k).min(layout.len);
                for j in start..end {
                    let idx = layout.index(o, j, i);
                    let v = data[idx];
                    if !v.is_finite() {
                        return Err(Error::NonFinite { index: idx, value: v });
                    }
                    buf.push(v);
                }
                blocks.push(quantize_block(&buf, spec)?);
            }
        }
    }
    let tail = layout.len % k;
    Ok(MxTensor {
        shape: shape.to_vec(),
        axis,
        spec: *spec,
        blocks,
        tail_len: if tail == 0 && layout.len > 0 { k } else { tail },
    })
}

pub fn dequantize_tensor(mt: &MxTensor) -> Vec<f64> {
    let layout = AxisLayout::new(&mt.shape, mt.axis).expect("validated at construction");
    let mut out = vec![0.0; mt.shape.iter().product()];
    let per_row = mt.blocks_per_row();
    let k = mt.spec.block_size;
    for o in 0..layout.outer {
        for i in 0..layout.inner {
            let row = o * layout.inner + i;
            for b in 0..per_row {
                let block = &mt.blocks[row * per_row + b];
                for (t, v) in dequantize_block(block, &mt.spec).into_iter().enumerate() {
                    out[layout.index(o, b * k + t, i)] = v;
                }
            }
        }
    }
    out
}

/// Element counts gathered while fake-quantizing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct QuantStats {
    pub elements: usize,
    /// Elements whose code is the max-magnitude finite code.
    pub last_bin: usize,
}

impl QuantStats {
    pub fn fraction(&self) -> f64 {
        if self.elements == 0 {
            0.0
        } else {
            self.last_bin as f64 / self.elements as f64
        }
    }

    pub fn merge(&mut self, other: QuantStats) {
        self.elements += other.elements;
        self.last_bin += other.last_bin;
    }
}

/// Quantize then dequantize `data` in place, blocking along `axis` of
/// `shape`. Equivalent to `dequantize_tensor(quantize_tensor(..))` but works
/// on any working precision and never materializes codes.
pub fn fake_quantize<T: Real>(data: &mut [T], shape: &[usize], axis: usize, spec: &MxSpec) -> Result<QuantStats> {
    spec.validate()?;
    check_shape(data.len(), shape)?;
    let layout = AxisLayout::new(shape, axis)?;
    let fmt = spec.element.descriptor();
    let opts = spec.encode_options();
    let max_normal = fmt.max_normal;
    let k = spec.block_size;
    let mut stats = QuantStats::default();
    let mut absmax = vec![0.0f64; layout.inner];
    let mut scales = vec![0.0f64; layout.inner];

    for o in 0..layout.outer {
        for start in (0..layout.len).step_by(k) {
            let end = (start + k).min(layout.len);
            absmax.iter_mut().for_each(|m| *m = 0.0);
            for j in start..end {
                let base = layout.index(o, j, 0);
                for (i, m) in absmax.iter_mut().enumerate() {
                    let v = data[base + i].to_f64();
                    if !v.is_finite() {
                        return Err(Error::NonFinite { index: base + i, value: v });
                    }
                    *m = m.max(v.abs());
                }
            }
            for (s, &m) in scales.iter_mut().zip(&absmax) {
                *s = pow2(block_exponent(m, spec));
            }
            for j in start..end {
                let base = layout.index(o, j, 0);
                for i in 0..layout.inner {
                    let x = data[base + i].to_f64();
                    let scale = scales[i];
                    let q = saturating_round(x / scale, fmt, opts.rounding, opts.flush_subnormals);
                    if q.abs() == max_normal {
                        stats.last_bin += 1;
                    }
                    data[base + i] = T::from_f64(q * scale);
                }
            }
            stats.elements += (end - start) * layout.inner;
        }
    }
    Ok(stats)
}

/// Fraction of (non-padding) elements that land in the max-magnitude code.
pub fn last_bin_fraction(data: &[f64], shape: &[usize], spec: &MxSpec, axis: usize) -> Result<f64> {
    let mut scratch = data.to_vec();
    Ok(fake_quantize(&mut scratch, shape, axis, spec)?.fraction())
}

const CONTAINER_MAGIC: &[u8; 4] = b"MXT1";
const CONTAINER_VERSION: u16 = 1;

fn format_id(f: ElementFormat) -> u8 {
    match f {
        ElementFormat::E4M3 => 0,
        ElementFormat::E5M2 => 1,
        ElementFormat::E2M3 => 2,
        ElementFormat::E3M2 => 3,
        ElementFormat::Bf16 => 4,
    }
}

fn format_from_id(id: u8) -> Option<ElementFormat> {
    ElementFormat::ALL.into_iter().find(|f| format_id(*f) == id)
}

/// Pack `width`-bit codes LSB-first into bytes.
fn pack_codes(codes: &[CodeWord], width: u32, out: &mut Vec<u8>) {
    let mut acc: u32 = 0;
    let mut nbits = 0;
    for c in codes {
        acc |= u32::from(c.bits) << nbits;
        nbits += width;
        while nbits >= 8 {
            out.push(acc as u8);
            acc >>= 8;
            nbits -= 8;
        }
    }
    if nbits > 0 {
        out.push(acc as u8);
    }
}

fn unpack_codes(bytes: &[u8], width: u32, count: usize, format: ElementFormat) -> Vec<CodeWord> {
    let mut codes = Vec::with_capacity(count);
    let mut acc: u32 = 0;
    let mut nbits = 0;
    let mut it = bytes.iter();
    let mask = (1u32 << width) - 1;
    while codes.len() < count {
        while nbits < width {
            acc |= u32::from(*it.next().unwrap_or(&0)) << nbits;
            nbits += 8;
        }
        codes.push(CodeWord {
            bits: (acc & mask) as u16,
            format,
        });
        acc >>= width;
        nbits -= width;
    }
    codes
}

/// Serialize an MX tensor: fixed header, then for each block one E8M0 scale
/// byte followed by the block's codes packed LSB-first.
pub fn write_container<W: Write>(mt: &MxTensor, mut w: W) -> std::io::Result<()> {
    let spec = &mt.spec;
    w.write_all(CONTAINER_MAGIC)?;
    w.write_all(&CONTAINER_VERSION.to_le_bytes())?;
    w.write_all(&[
        format_id(spec.element),
        match spec.rounding {
            RoundingMode::NearestEven => 0,
            RoundingMode::TowardZero => 1,
        },
        spec.exponent_offset as u8,
        u8::from(spec.conditional_offset) | (u8::from(spec.flush_subnormals) << 1),
    ])?;
    w.write_all(&(spec.block_size as u32).to_le_bytes())?;
    w.write_all(&(mt.axis as u32).to_le_bytes())?;
    w.write_all(&(mt.shape.len() as u32).to_le_bytes())?;
    for &d in &mt.shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    w.write_all(&(mt.tail_len as u32).to_le_bytes())?;
    w.write_all(&(mt.blocks.len() as u64).to_le_bytes())?;
    let width = spec.element.descriptor().width();
    let mut buf = Vec::new();
    for block in &mt.blocks {
        buf.clear();
        // shared_exp is always clamped into range
        buf.push(ScaleFormat::encode(block.shared_exp).map_err(std::io::Error::other)?);
        pack_codes(&block.codes, width, &mut buf);
        w.write_all(&buf)?;
    }
    Ok(())
}

fn read_exact<const N: usize, R: Read>(r: &mut R) -> std::io::Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

pub fn read_container<R: Read>(mut r: R) -> Result<MxTensor> {
    let bad = |m: &str| Error::invalid(format!("MX container: {m}"));
    let io = |e| Error::io("reading MX container", e);
    let magic: [u8; 4] = read_exact(&mut r).map_err(io)?;
    if &magic != CONTAINER_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u16::from_le_bytes(read_exact(&mut r).map_err(io)?);
    if version != CONTAINER_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let [fid, rounding, offset, flags] = read_exact::<4, _>(&mut r).map_err(io)?;
    let element = format_from_id(fid).ok_or_else(|| bad("unknown element format"))?;
    let block_size = u32::from_le_bytes(read_exact(&mut r).map_err(io)?) as usize;
    let spec = MxSpec {
        element,
        block_size,
        rounding: match rounding {
            0 => RoundingMode::NearestEven,
            1 => RoundingMode::TowardZero,
            _ => return Err(bad("unknown rounding mode")),
        },
        exponent_offset: offset as i32,
        conditional_offset: flags & 1 != 0,
        flush_subnormals: flags & 2 != 0,
    };
    spec.validate()?;
    let axis = u32::from_le_bytes(read_exact(&mut r).map_err(io)?) as usize;
    let ndim = u32::from_le_bytes(read_exact(&mut r).map_err(io)?) as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(u64::from_le_bytes(read_exact(&mut r).map_err(io)?) as usize);
    }
    let layout = AxisLayout::new(&shape, axis)?;
    let tail_len = u32::from_le_bytes(read_exact(&mut r).map_err(io)?) as usize;
    let nblocks = u64::from_le_bytes(read_exact(&mut r).map_err(io)?) as usize;
    let per_row = layout.len.div_ceil(block_size);
    if nblocks != per_row * layout.outer * layout.inner {
        return Err(bad("block count does not match shape"));
    }
    let width = element.descriptor().width();
    let code_bytes = (block_size * width as usize).div_ceil(8);
    let mut blocks = Vec::with_capacity(nblocks);
    let mut buf = vec![0u8; 1 + code_bytes];
    for b in 0..nblocks {
        r.read_exact(&mut buf).map_err(io)?;
        let shared_exp = ScaleFormat::decode(buf[0]).ok_or_else(|| bad("NaN block scale"))?;
        let codes = unpack_codes(&buf[1..], width, block_size, element);
        let idx_in_row = b % per_row;
        let valid_len = if idx_in_row + 1 == per_row {
            layout.len - idx_in_row * block_size
        } else {
            block_size
        };
        blocks.push(MxBlock {
            shared_exp,
            codes,
            valid_len,
        });
    }
    Ok(MxTensor {
        shape,
        axis,
        spec,
        blocks,
        tail_len,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN_BLOCK: [f64; 5] = [0.89740956, 0.89628334, 0.88358812, 0.88474816, 0.90372837];

    fn e4m3() -> MxSpec {
        MxSpec::new(ElementFormat::E4M3)
    }

    #[test]
    fn shared_exponent_examples() {
        assert_eq!(compute_shared_exponent(&LN_BLOCK, &e4m3()).unwrap(), -9);
        assert_eq!(compute_shared_exponent(&[0.0; 4], &e4m3()).unwrap(), -127);
        assert_eq!(compute_shared_exponent(&[1.0, -0.5], &e4m3()).unwrap(), -8);
        assert!(matches!(
            compute_shared_exponent(&[1.0, f64::NAN], &e4m3()),
            Err(Error::NonFinite { index: 1, .. })
        ));
    }

    #[test]
    fn shared_exponent_clamps_to_e8m0() {
        assert_eq!(compute_shared_exponent(&[1e-300], &e4m3()).unwrap(), -127);
        assert_eq!(compute_shared_exponent(&[1e300], &e4m3()).unwrap(), 127);
    }

    #[test]
    fn ln_block_clamps_to_448() {
        let block = quantize_block(&LN_BLOCK, &e4m3()).unwrap();
        assert_eq!(block.shared_exp, -9);
        assert_eq!(block.codes.len(), 32);
        for c in &block.codes[..5] {
            assert_eq!(c.bits, 0b0_1111_110);
        }
        assert!(block.codes[5..].iter().all(|c| c.bits == 0));
        let deq = dequantize_block(&block, &e4m3());
        assert_eq!(deq, vec![0.875; 5]);
    }

    #[test]
    fn powers_of_two_are_exact() {
        let v = [1.0, 0.5, 0.25, 0.125];
        let block = quantize_block(&v, &e4m3()).unwrap();
        assert_eq!(block.shared_exp, -8);
        assert_eq!(dequantize_block(&block, &e4m3()), v.to_vec());
    }

    #[test]
    fn oversize_block_rejected() {
        let v = vec![1.0; 33];
        assert!(quantize_block(&v, &e4m3()).is_err());
    }

    #[test]
    fn tensor_blocking_counts() {
        let t = quantize_tensor(&vec![1.0; 128], &[2, 64], &e4m3(), 1).unwrap();
        assert_eq!(t.blocks.len(), 4);
        assert_eq!(t.tail_len, 32);
        let t = quantize_tensor(&vec![1.0; 33], &[1, 33], &e4m3(), 1).unwrap();
        assert_eq!(t.blocks.len(), 2);
        assert_eq!(t.tail_len, 1);
        assert_eq!(t.blocks[1].valid_len, 1);
    }

    #[test]
    fn tensor_nan_reports_index() {
        let mut data = vec![1.0; 12];
        data[7] = f64::INFINITY;
        let err = quantize_tensor(&data, &[3, 4], &e4m3(), 0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 7, .. }));
    }

    #[test]
    fn axis_zero_blocks_columns() {
        // column 0 holds the LN block, column 1 holds powers of two
        let mut data = vec![0.0; 10];
        for (j, v) in LN_BLOCK.iter().enumerate() {
            data[j * 2] = *v;
            data[j * 2 + 1] = 0.5f64.powi(j as i32);
        }
        let t = quantize_tensor(&data, &[5, 2], &e4m3(), 0).unwrap();
        assert_eq!(t.blocks.len(), 2);
        assert_eq!(t.blocks[0].shared_exp, -9);
        assert_eq!(t.blocks[1].shared_exp, -8);
        let back = dequantize_tensor(&t);
        for j in 0..5 {
            assert_eq!(back[j * 2], 0.875);
            assert_eq!(back[j * 2 + 1], data[j * 2 + 1]);
        }
    }

    #[test]
    fn fake_quantize_matches_block_path() {
        let data: Vec<f64> = (0..3 * 70).map(|i| ((i * 37 % 101) as f64 - 50.0) * 0.013).collect();
        for axis in 0..2 {
            let mt = quantize_tensor(&data, &[3, 70], &e4m3(), axis).unwrap();
            let reference = dequantize_tensor(&mt);
            let mut fast = data.clone();
            fake_quantize(&mut fast, &[3, 70], axis, &e4m3()).unwrap();
            assert_eq!(fast, reference);
        }
    }

    #[test]
    fn last_bin_examples() {
        let mut data = LN_BLOCK.to_vec();
        assert_eq!(last_bin_fraction(&data, &[5], &e4m3(), 0).unwrap(), 1.0);
        data = vec![1.0, 0.5, 0.25, 0.125];
        assert_eq!(last_bin_fraction(&data, &[4], &e4m3(), 0).unwrap(), 0.0);
    }

    #[test]
    fn overflow_predicate_examples() {
        let s = e4m3();
        assert!(overflow_predicate(0.88358812, 0.90372837, &s));
        assert!(!overflow_predicate(0.5, 0.5, &s));
        assert!(!overflow_predicate(0.45186, 0.90372837, &s));
    }

    #[test]
    fn bump_exponent_shifts_scale() {
        let mut s = e4m3();
        s.exponent_offset = 1;
        let b = quantize_block(&LN_BLOCK, &s).unwrap();
        assert_eq!(b.shared_exp, -8);
        // ratios 226..232 all round to 224, one step below the max code
        assert!(b.codes[..5].iter().all(|c| c.decode() == 224.0));
        assert_eq!(dequantize_block(&b, &s), vec![0.875; 5]);
        assert_eq!(last_bin_fraction(&LN_BLOCK, &[5], &s, 0).unwrap(), 0.0);
    }

    #[test]
    fn conditional_bump_only_touches_clamping_blocks() {
        let mut s = e4m3();
        s.exponent_offset = 1;
        s.conditional_offset = true;
        assert_eq!(quantize_block(&LN_BLOCK, &s).unwrap().shared_exp, -8);
        assert_eq!(quantize_block(&[1.0, 0.5], &s).unwrap().shared_exp, -8);
        s.conditional_offset = false;
        assert_eq!(quantize_block(&[1.0, 0.5], &s).unwrap().shared_exp, -7);
    }

    #[test]
    fn invalid_spec_rejected() {
        let mut s = e4m3();
        s.exponent_offset = 2;
        assert!(s.validate().is_err());
        s.exponent_offset = 0;
        s.block_size = 0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn container_round_trip_fp6() {
        let data: Vec<f64> = (0..2 * 45).map(|i| (i as f64 - 40.0) * 0.37).collect();
        let spec = MxSpec::new(ElementFormat::E2M3);
        let mt = quantize_tensor(&data, &[2, 45], &spec, 1).unwrap();
        let mut bytes = Vec::new();
        write_container(&mt, &mut bytes).unwrap();
        let back = read_container(&bytes[..]).unwrap();
        assert_eq!(back, mt);
    }

    #[test]
    fn container_rejects_garbage() {
        assert!(read_container(&b"NOPE"[..]).is_err());
        assert!(read_container(&b"MX"[..]).is_err());
    }
}
