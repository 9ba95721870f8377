use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use mxlab_ffi::*;

fn last_error() -> String {
    let p = mxlab_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn spec(format: u32, block: usize) -> *mut MxlabSpec {
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { mxlab_spec_new(format, block, &mut s) }, MXLAB_OK);
    assert!(!s.is_null());
    s
}

#[test]
fn version_is_nul_terminated() {
    let v = unsafe { CStr::from_ptr(mxlab_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn scalar_round_trip() {
    let mut bits = 0u16;
    assert_eq!(
        unsafe { mxlab_encode_scalar(1.0, MXLAB_FORMAT_E4M3, MXLAB_ROUND_NEAREST_EVEN, true, &mut bits) },
        MXLAB_OK
    );
    assert_eq!(bits, 0x38);
    let mut v = 0.0;
    assert_eq!(unsafe { mxlab_decode_scalar(0x7e, MXLAB_FORMAT_E4M3, &mut v) }, MXLAB_OK);
    assert_eq!(v, 448.0);
    assert_eq!(
        unsafe { mxlab_encode_scalar(1e6, MXLAB_FORMAT_E4M3, MXLAB_ROUND_NEAREST_EVEN, true, &mut bits) },
        MXLAB_OK
    );
    assert_eq!(bits, 0x7e);
    assert_eq!(unsafe { mxlab_decode_scalar(0x7f, MXLAB_FORMAT_E4M3, &mut v) }, MXLAB_OK);
    assert!(v.is_nan());
}

#[test]
fn null_and_bad_ids_are_reported() {
    assert_eq!(
        unsafe { mxlab_encode_scalar(1.0, MXLAB_FORMAT_E4M3, 0, true, ptr::null_mut()) },
        MXLAB_ERR_NULL_POINTER
    );
    assert!(last_error().contains("out_bits"));
    let mut bits = 0u16;
    assert_eq!(unsafe { mxlab_encode_scalar(1.0, 99, 0, true, &mut bits) }, MXLAB_ERR_INVALID_INPUT);
    assert!(last_error().contains("99"));
    assert_eq!(
        unsafe { mxlab_encode_scalar(f64::NAN, MXLAB_FORMAT_E2M3, 0, true, &mut bits) },
        MXLAB_ERR_INVALID_INPUT
    );
    assert!(last_error().contains("NaN"));
    assert_eq!(
        unsafe { mxlab_encode_scalar(f64::NAN, MXLAB_FORMAT_E4M3, 0, true, &mut bits) },
        MXLAB_OK
    );
    assert_eq!(bits, 0x7f);
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { mxlab_spec_new(MXLAB_FORMAT_E4M3, 0, &mut s) }, MXLAB_ERR_INVALID_INPUT);
    assert!(s.is_null());
    assert_eq!(unsafe { mxlab_spec_new(MXLAB_FORMAT_E4M3, 32, ptr::null_mut()) }, MXLAB_ERR_NULL_POINTER);
    let mut out = 0.0;
    assert_eq!(
        unsafe { mxlab_last_bin_fraction(ptr::null(), [1.0].as_ptr(), 1, 1, 1, &mut out) },
        MXLAB_ERR_NULL_POINTER
    );
    unsafe { mxlab_spec_free(ptr::null_mut()) };
    // success clears the message
    assert_eq!(unsafe { mxlab_decode_scalar(0, MXLAB_FORMAT_E4M3, &mut out) }, MXLAB_OK);
    assert!(mxlab_last_error().is_null());
}

#[test]
fn block_round_trip_and_clamp() {
    let s = spec(MXLAB_FORMAT_E4M3, 32);
    let values = [0.0016_f64, 0.0017, 0.0018, 0.0019, 0.0020];
    let mut e = 0;
    let mut codes = [0u16; 5];
    assert_eq!(
        unsafe { mxlab_quantize_block(s, values.as_ptr(), values.len(), &mut e, codes.as_mut_ptr()) },
        MXLAB_OK
    );
    assert_eq!(e, -17);
    let mut back = [0.0; 5];
    assert_eq!(
        unsafe { mxlab_dequantize_block(s, e, codes.as_ptr(), 5, back.as_mut_ptr()) },
        MXLAB_OK
    );
    for (a, b) in values.iter().zip(&back) {
        assert!((a - b).abs() <= a * 0.0625, "{a} {b}");
    }
    let ln = [0.99_f64, 0.995, 0.998, 0.999, 0.9995];
    let mut frac = 0.0;
    assert_eq!(unsafe { mxlab_last_bin_fraction(s, ln.as_ptr(), 1, 5, 1, &mut frac) }, MXLAB_OK);
    assert_eq!(frac, 1.0);
    let mut f32s: Vec<f32> = ln.iter().map(|&x| x as f32).collect();
    assert_eq!(
        unsafe { mxlab_fake_quantize_f32(s, f32s.as_mut_ptr(), 1, 5, 1, &mut frac) },
        MXLAB_OK
    );
    assert!(f32s.iter().all(|&x| x == 0.875));
    assert_eq!(frac, 1.0);
    assert_eq!(unsafe { mxlab_spec_set_exponent_offset(s, 1, false) }, MXLAB_OK);
    assert_eq!(unsafe { mxlab_last_bin_fraction(s, ln.as_ptr(), 1, 5, 1, &mut frac) }, MXLAB_OK);
    assert_eq!(frac, 0.0);
    assert_eq!(unsafe { mxlab_spec_set_rounding(s, 7) }, MXLAB_ERR_INVALID_INPUT);
    let too_many = [0u16; 33];
    assert_eq!(
        unsafe { mxlab_dequantize_block(s, 0, too_many.as_ptr(), 33, [0.0; 33].as_mut_ptr()) },
        MXLAB_ERR_INVALID_INPUT
    );
    unsafe { mxlab_spec_free(s) };
}

#[test]
fn spec_by_name() {
    let name = CString::new("mxfp6-e2m3").unwrap();
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { mxlab_spec_from_name(name.as_ptr(), 32, &mut s) }, MXLAB_OK);
    let mut frac = 0.0;
    assert_eq!(
        unsafe { mxlab_last_bin_fraction(s, [7.5, 1.0].as_ptr(), 1, 2, 1, &mut frac) },
        MXLAB_OK
    );
    assert_eq!(frac, 0.5);
    unsafe { mxlab_spec_free(s) };
    let bad = CString::new("fp7").unwrap();
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { mxlab_spec_from_name(bad.as_ptr(), 32, &mut s) }, MXLAB_ERR_INVALID_INPUT);
    assert!(s.is_null());
}

#[test]
fn spikes_with_small_buffer() {
    let losses = [1.0, 200.0, 1.0, 300.0, 1.0, 101.0];
    let mut steps = [0usize; 2];
    let mut count = 0;
    let st = unsafe { mxlab_detect_spikes(losses.as_ptr(), 6, 100.0, steps.as_mut_ptr(), 2, &mut count) };
    assert_eq!(st, MXLAB_ERR_BUFFER_TOO_SMALL);
    assert_eq!(count, 3);
    assert_eq!(steps, [1, 3]);
    let mut all = [0usize; 4];
    assert_eq!(
        unsafe { mxlab_detect_spikes(losses.as_ptr(), 6, 100.0, all.as_mut_ptr(), 4, &mut count) },
        MXLAB_OK
    );
    assert_eq!(&all[..3], &[1, 3, 5]);
}

#[test]
fn margin_and_fit() {
    assert!((mxlab_stability_margin(0.1, 10.0, 0.0) - 0.0).abs() < 1e-12);
    assert!((mxlab_stability_margin(0.1, 10.0, 0.5) - 0.5).abs() < 1e-12);
    let (a, b, e, alpha, beta) = (400.0, 800.0, 1.5, 0.34, 0.28);
    let mut n = Vec::new();
    let mut d = Vec::new();
    let mut l = Vec::new();
    for &ni in &[1e6, 3e6, 1e7, 3e7, 1e8] {
        for &di in &[1e8, 1e9, 1e10] {
            n.push(ni);
            d.push(di);
            l.push(e + a / f64::powf(ni, alpha) + b / f64::powf(di, beta));
        }
    }
    let mut fit = MxlabScalingFit::default();
    assert_eq!(
        unsafe { mxlab_fit_scaling_law(n.as_ptr(), d.as_ptr(), l.as_ptr(), n.len(), 1e-3, &mut fit) },
        MXLAB_OK
    );
    assert!((fit.alpha - alpha).abs() < 0.02, "{fit:?}");
    assert!((fit.beta - beta).abs() < 0.02, "{fit:?}");
    assert!((fit.allocation_exponent - beta / (alpha + beta)).abs() < 0.02);
    assert_eq!(
        unsafe { mxlab_fit_scaling_law(n.as_ptr(), d.as_ptr(), l.as_ptr(), 3, 1e-3, &mut fit) },
        MXLAB_ERR_ILL_POSED_FIT
    );
}

fn header() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include").join("mxlab.h")
}

#[test]
fn header_declares_every_export() {
    let text = std::fs::read_to_string(header()).unwrap();
    let src = std::fs::read_to_string(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("src/lib.rs")).unwrap();
    let exports: Vec<&str> = src
        .lines()
        .filter_map(|l| l.split("extern \"C\" fn ").nth(1))
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 15, "{exports:?}");
    for f in exports {
        assert!(text.contains(&format!("{f}(")), "header lacks {f}");
    }
    for c in ["MXLAB_OK", "MXLAB_ERR_PANIC", "MXLAB_FORMAT_BF16", "MxlabScalingFit", "MxlabSpec"] {
        assert!(text.contains(c), "header lacks {c}");
    }
}

#[test]
fn header_compiles_as_c() {
    let Some(cc) = ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| Command::new(c).arg("--version").output().is_ok())
    else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("smoke.c");
    std::fs::write(
        &src,
        "#include \"mxlab.h\"\nint main(void) { MxlabSpec *s = 0; MxlabScalingFit f; (void)f;\n\
         return mxlab_spec_new(MXLAB_FORMAT_E4M3, 32, &s) == MXLAB_OK ? 0 : 1; }\n",
    )
    .unwrap();
    let out = Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(header().parent().unwrap())
        .arg(&src)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
