use mxlab::fp_codec::{
    decode_scalar, encode_scalar, enumerate_codes, CodeWord, ElementFormat, RoundingMode, ScaleFormat,
};
use mxlab::mx_block::{
    dequantize_block, dequantize_tensor, last_bin_fraction, overflow_predicate, quantize_block, quantize_tensor, MxSpec,
};
use proptest::prelude::*;

fn any_format() -> impl Strategy<Value = ElementFormat> {
    prop::sample::select(ElementFormat::ALL.to_vec())
}

fn mx_format() -> impl Strategy<Value = ElementFormat> {
    prop::sample::select(vec![
        ElementFormat::E4M3,
        ElementFormat::E5M2,
        ElementFormat::E2M3,
        ElementFormat::E3M2,
    ])
}

fn ne(v: f64, f: ElementFormat) -> f64 {
    decode_scalar(encode_scalar(v, f, RoundingMode::NearestEven, true).unwrap())
}

/// Code nearest to `mag` among the positive codes, by linear scan.
fn nearest_positive(mag: f64, f: ElementFormat) -> f64 {
    let mut best = (f64::INFINITY, 0.0);
    for c in enumerate_codes(f) {
        let d = (c.value - mag).abs();
        if d < best.0 {
            best = (d, c.value);
        }
    }
    best.1
}

#[test]
fn every_finite_code_round_trips() {
    for f in ElementFormat::ALL {
        let n: u32 = 1 << (1 + f.descriptor().exponent_bits + f.descriptor().mantissa_bits);
        for b in 0..n {
            let c = CodeWord::new(b as u16, f).unwrap();
            let v = decode_scalar(c);
            if v.is_finite() {
                let back = encode_scalar(v, f, RoundingMode::NearestEven, false).unwrap();
                assert_eq!(back.bits, c.bits, "{f} {b:#x} -> {v}");
            }
        }
    }
}

#[test]
fn positive_codes_strictly_increase() {
    for f in ElementFormat::ALL {
        let codes = enumerate_codes(f);
        assert!(codes.windows(2).all(|w| w[0].value < w[1].value), "{f}");
        assert!(codes.iter().enumerate().all(|(i, c)| c.index == i));
    }
}

#[test]
fn midpoints_round_to_even_mantissa() {
    for f in ElementFormat::ALL {
        let codes = enumerate_codes(f);
        for w in codes.windows(2) {
            let mid = 0.5 * (w[0].value + w[1].value);
            let got = encode_scalar(mid, f, RoundingMode::NearestEven, true).unwrap();
            let even = if w[0].code.bits & 1 == 0 { w[0].code } else { w[1].code };
            assert_eq!(got.bits, even.bits, "{f} tie at {mid}");
            let neg = encode_scalar(-mid, f, RoundingMode::NearestEven, true).unwrap();
            assert_eq!(decode_scalar(neg), -decode_scalar(even));
        }
    }
}

#[test]
fn band_relative_to_absmax_alone_is_not_enough() {
    // 0.88 * absmax is above 0.875 * absmax but still 405 units of the scale
    let absmax = 0.9;
    let v = [absmax, 0.88 * absmax];
    let spec = MxSpec::new(ElementFormat::E4M3);
    assert_eq!(last_bin_fraction(&v, &[1, 2], &spec, 1).unwrap(), 0.5);
    assert!(!overflow_predicate(v[1], absmax, &spec));
}

#[test]
fn e8m0_scale_range() {
    assert_eq!(ScaleFormat::value(-127), 2f64.powi(-127));
    assert_eq!(ScaleFormat::decode(ScaleFormat::encode(5).unwrap()), Some(5));
    assert!(ScaleFormat::encode(128).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn relative_error_is_half_ulp(f in any_format(), u in 0.0f64..1.0, neg in any::<bool>()) {
        let d = f.descriptor();
        let (lo, hi) = (d.min_normal().ln(), d.max_normal.ln());
        let v = (lo + u * (hi - lo)).exp().min(d.max_normal);
        let v = if neg { -v } else { v };
        let q = ne(v, f);
        prop_assert!((q - v).abs() / v.abs() <= 2f64.powi(-(d.mantissa_bits as i32 + 1)), "{} {} -> {}", f, v, q);
    }

    #[test]
    fn matches_linear_scan(f in mx_format(), u in 0.0f64..1.0) {
        let d = f.descriptor();
        let (lo, hi) = ((d.min_subnormal() / 2.0).ln(), (d.max_normal * 2.0).ln());
        let v = (lo + u * (hi - lo)).exp();
        let want = nearest_positive(v, f);
        let got = ne(v, f);
        // off-tie values have a unique nearest code; ties are covered exhaustively
        if v < d.min_subnormal() / 2.0 {
            prop_assert_eq!(got, 0.0);
        } else {
            prop_assert_eq!(got, want, "{} {}", f, v);
        }
    }

    #[test]
    fn toward_zero_never_grows(f in any_format(), v in -1e3f64..1e3) {
        let c = encode_scalar(v, f, RoundingMode::TowardZero, true).unwrap();
        prop_assert!(decode_scalar(c).abs() <= v.abs());
    }
}

fn block(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(prop_oneof![Just(0.0), -100.0f64..100.0, -1e-3f64..1e-3], 1..=len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn dequantized_within_scaled_max(f in mx_format(), v in block(32)) {
        let spec = MxSpec::new(f);
        let b = quantize_block(&v, &spec).unwrap();
        let bound = f.descriptor().max_normal * 2f64.powi(b.shared_exp);
        prop_assert!((-127..=127).contains(&b.shared_exp));
        for x in dequantize_block(&b, &spec) {
            prop_assert!(x.abs() <= bound);
        }
    }

    #[test]
    fn quantization_is_idempotent(f in mx_format(), v in block(64), rows in 1usize..4) {
        let spec = MxSpec::new(f);
        let data: Vec<f64> = (0..rows).flat_map(|r| v.iter().map(move |x| x * (r + 1) as f64)).collect();
        let shape = [rows, v.len()];
        let q1 = quantize_tensor(&data, &shape, &spec, 1).unwrap();
        let q2 = quantize_tensor(&dequantize_tensor(&q1), &shape, &spec, 1).unwrap();
        prop_assert_eq!(q1, q2);
    }

    #[test]
    fn power_of_two_rescaling_shifts_exponent(f in mx_format(), v in block(32), j in -20i32..20) {
        prop_assume!(v.iter().any(|&x| x != 0.0));
        let spec = MxSpec::new(f);
        let a = quantize_block(&v, &spec).unwrap();
        let scaled: Vec<f64> = v.iter().map(|x| x * 2f64.powi(j)).collect();
        let b = quantize_block(&scaled, &spec).unwrap();
        prop_assert_eq!(b.shared_exp, a.shared_exp + j);
        prop_assert_eq!(a.codes, b.codes);
    }

    #[test]
    fn clamp_iff_overflow_or_rounds_to_max(f in mx_format(), v in block(32)) {
        let spec = MxSpec::new(f);
        let absmax = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        prop_assume!(absmax > 0.0);
        let b = quantize_block(&v, &spec).unwrap();
        let max_code = f.descriptor().max_code();
        let max_normal = f.descriptor().max_normal;
        let x = 2f64.powi(b.shared_exp);
        for (i, &vi) in v.iter().enumerate() {
            let clamped = b.codes[i].bits & max_code == max_code;
            let rounds_up = nearest_positive(vi.abs() / x, f) == max_normal;
            prop_assert_eq!(clamped, overflow_predicate(vi, absmax, &spec) || rounds_up, "{} / {}", vi, x);
        }
    }

    #[test]
    fn tight_band_fills_last_bin(e in -20i32..20, u in prop::collection::vec(0.0f64..1.0, 1..32)) {
        // every magnitude in (0.875 * 2^e, 2^e) lands above 448 times the scale
        let top = 2f64.powi(e);
        let v: Vec<f64> = u.iter().map(|s| top * (0.875 + 0.125 * (0.001 + 0.998 * s))).collect();
        let spec = MxSpec::new(ElementFormat::E4M3);
        let n = v.len();
        prop_assert_eq!(last_bin_fraction(&v, &[1, n], &spec, 1).unwrap(), 1.0);
    }

    #[test]
    fn bump_shifts_every_block_by_one(f in mx_format(), v in block(32)) {
        prop_assume!(v.iter().any(|&x| x != 0.0));
        let base = MxSpec::new(f);
        let bumped = MxSpec { exponent_offset: 1, ..base };
        let a = quantize_block(&v, &base).unwrap();
        let b = quantize_block(&v, &bumped).unwrap();
        prop_assert_eq!(b.shared_exp, a.shared_exp + 1);
        let x = 2f64.powi(b.shared_exp);
        for (i, &vi) in v.iter().enumerate() {
            let want = encode_scalar(vi / x, f, RoundingMode::NearestEven, true).unwrap();
            prop_assert_eq!(b.codes[i], want);
        }
    }
}
