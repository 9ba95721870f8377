use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const CONFIG: &str = r#"
[model]
depth = 1
d_model = 8
activation = "gelu"

[train]
lr = 1e-3
steps = 6
batch = 8
quant = "mxfp8-e4m3"
"#;

fn mxlab(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mxlab"))
        .args(args)
        .current_dir(dir)
        .env("MXLAB_OUTPUT_DIR", dir.join("out"))
        .output()
        .expect("run mxlab")
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn files_with(dir: &Path, suffix: &str) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.to_string_lossy().ends_with(suffix))
        .collect();
    v.sort();
    v
}

#[test]
fn train_is_reproducible_and_tagged() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "run.toml", CONFIG);
    let out = mxlab(tmp.path(), &["train", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let logs = files_with(&tmp.path().join("out"), ".jsonl");
    assert_eq!(logs.len(), 1);
    let first = fs::read(&logs[0]).unwrap();
    let summary = fs::read(&files_with(&tmp.path().join("out"), ".summary.json")[0]).unwrap();
    let text = String::from_utf8(first.clone()).unwrap();
    assert_eq!(text.lines().count(), 6);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(v["fingerprint"].as_str().is_some_and(|f| f.len() == 16));
        assert!(v["version"].as_str().is_some_and(|s| s.starts_with("mxlab ")));
        assert!(v.get("wall_time").is_none());
    }
    let again = mxlab(tmp.path(), &["train", cfg.to_str().unwrap()]);
    assert_eq!(again.status.code(), Some(0));
    assert_eq!(fs::read(&logs[0]).unwrap(), first);
    assert_eq!(fs::read(&files_with(&tmp.path().join("out"), ".summary.json")[0]).unwrap(), summary);
}

#[test]
fn analyze_copies_paired_columns_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let hp = write(tmp.path(), "hp.toml", &CONFIG.replace("\"mxfp8-e4m3\"", "\"fp32\""));
    let lp = write(tmp.path(), "lp.toml", CONFIG);
    let out = mxlab(tmp.path(), &["dual", hp.to_str().unwrap(), lp.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let out_dir = tmp.path().join("out");
    let paired = files_with(&out_dir, ".paired.jsonl");
    assert_eq!(paired.len(), 1);
    let report = tmp.path().join("report");
    fs::create_dir(&report).unwrap();
    let an = mxlab(tmp.path(), &["analyze", out_dir.to_str().unwrap(), "--out", report.to_str().unwrap()]);
    assert_eq!(an.status.code(), Some(0), "{}", String::from_utf8_lossy(&an.stderr));
    assert!(report.join("analysis.json").exists());

    let recs: Vec<serde_json::Value> = fs::read_to_string(&paired[0])
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let stem = paired[0].file_stem().unwrap().to_string_lossy().to_string();
    let csv = fs::read_to_string(report.join(format!("{stem}.analysis.csv"))).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("# fingerprint="));
    assert_eq!(lines.next().unwrap(), "step,metric,value,tensor_name");
    let mut seen = 0;
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        if cols[1] == "zeta_lower" || cols[1] == "cosine" {
            let step: u64 = cols[0].parse().unwrap();
            let rec = recs.iter().find(|r| r["step"].as_u64() == Some(step)).unwrap();
            let want = rec[cols[1]].as_f64().unwrap();
            assert_eq!(cols[2].parse::<f64>().unwrap().to_bits(), want.to_bits(), "{line}");
            seen += 1;
        }
    }
    assert_eq!(seen, 2 * recs.len());
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = write(tmp.path(), "bad.toml", &CONFIG.replace("activation", "actvation"));
    let out = mxlab(tmp.path(), &["train", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("actvation"));

    assert_eq!(mxlab(tmp.path(), &["train", "missing.toml"]).status.code(), Some(4));
    assert_eq!(mxlab(tmp.path(), &["frobnicate"]).status.code(), Some(1));

    let div = write(tmp.path(), "div.toml", &format!("{CONFIG}divergence_threshold = 1e-30\n"));
    assert_eq!(mxlab(tmp.path(), &["train", div.to_str().unwrap()]).status.code(), Some(3));
}

#[test]
fn quantize_dequantize_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let values = [0.89740956f64, 0.89628334, 0.88358812, 0.88474816, 0.90372837].map(|v| v as f32);
    let raw: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(tmp.path().join("ln.f32"), raw).unwrap();
    write(tmp.path(), "ln.f32.json", r#"{"shape": [1, 5], "spec": "mxfp8-e4m3"}"#);
    let q = mxlab(tmp.path(), &["quantize", "ln.f32", "ln.mx"]);
    assert_eq!(q.status.code(), Some(0), "{}", String::from_utf8_lossy(&q.stderr));
    let d = mxlab(tmp.path(), &["dequantize", "ln.mx", "back.f32"]);
    assert_eq!(d.status.code(), Some(0), "{}", String::from_utf8_lossy(&d.stderr));
    let back: Vec<f32> = fs::read(tmp.path().join("back.f32"))
        .unwrap()
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    assert_eq!(back, vec![0.875; 5]);
    let header: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(tmp.path().join("back.f32.json")).unwrap()).unwrap();
    assert_eq!(header["shape"], serde_json::json!([1, 5]));
}

#[test]
fn codes_and_fit() {
    let tmp = tempfile::tempdir().unwrap();
    let out = mxlab(tmp.path(), &["codes", "e4m3"]);
    assert_eq!(out.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 127);

    let mut csv = String::from("N,D,loss\n");
    for i in 0..5 {
        for j in 0..4 {
            let n = 1e7 * 10f64.powf(i as f64 / 2.0);
            let d = n * 2.0 * 75f64.powf(j as f64 / 3.0);
            let loss = 0.53 + 1.94e3 * n.powf(-0.50) + 2.18e4 * d.powf(-0.56);
            csv.push_str(&format!("{n},{d},{loss}\n"));
        }
    }
    write(tmp.path(), "points.csv", &csv);
    let out = mxlab(tmp.path(), &["fit", "points.csv", "--out", "fit.json"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let fit: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("fit.json")).unwrap()).unwrap();
    for key in ["A", "B", "E", "alpha", "beta", "a", "fingerprint", "version"] {
        assert!(fit.get(key).is_some(), "missing {key}");
    }
    assert!((fit["alpha"].as_f64().unwrap() - 0.50).abs() < 1e-3);
    assert!((fit["a"].as_f64().unwrap() - 0.56 / 1.06).abs() < 1e-3);
}
