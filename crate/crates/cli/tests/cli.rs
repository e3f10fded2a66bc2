use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tilelut::quantize::{Grouping, Scheme};
use tilelut::tensor_io::{read_tensor_file, write_tensor_file, TensorData, TensorRecord};
use tilelut::Half;

fn tilelut(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tilelut"))
        .args(args)
        .env_remove("TILELUT_REPORT_DIR")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn f16_record(name: &str, rows: usize, cols: usize) -> TensorRecord {
    let data = (0..rows * cols)
        .map(|i| Half::from_f32(((i * 7919 % 1013) as f32 / 1013.0 - 0.5) * 3.0))
        .collect();
    TensorRecord::new(name, TensorData::F16 { dims: vec![rows, cols], data })
}

fn write_f16(path: &Path, records: &[TensorRecord]) {
    write_tensor_file(path, records).unwrap();
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn quantize_64x64_coalesced_is_4_5_bpw() {
    let dir = tempfile::tempdir().unwrap();
    let (src, dst) = (dir.path().join("in.tqk"), dir.path().join("out.tqk"));
    write_f16(&src, &[f16_record("w", 64, 64)]);
    let o = tilelut(&["quantize", "-i", s(&src), "-o", s(&dst), "--scheme", "q4_0", "--grouping", "tile", "--coalesce"]);
    assert_eq!(code(&o), 0, "{o:?}");
    assert!(stdout(&o).contains("4.500 bpw"), "{}", stdout(&o));
    let recs = read_tensor_file(&dst).unwrap();
    let TensorData::Quant(q) = &recs[0].data else { panic!("not quantized") };
    assert!(q.is_coalesced());
    assert_eq!(q.byte_len(), 64 * 64 / 256 * 144);
}

#[test]
fn conventional_grouping_keeps_baseline_layout() {
    let dir = tempfile::tempdir().unwrap();
    let (src, dst) = (dir.path().join("in.tqk"), dir.path().join("out.tqk"));
    write_f16(&src, &[f16_record("w", 40, 24), TensorRecord::new("norm", TensorData::F16 { dims: vec![24], data: vec![Half::ONE; 24] })]);
    let o = tilelut(&["quantize", "-i", s(&src), "-o", s(&dst), "--grouping", "conventional"]);
    assert_eq!(code(&o), 0, "{o:?}");
    let recs = read_tensor_file(&dst).unwrap();
    let TensorData::Quant(q) = &recs[0].data else { panic!("not quantized") };
    assert_eq!((q.grouping(), q.is_coalesced()), (Grouping::Conventional, false));
    // rows padded to 64, columns left alone
    assert_eq!(q.group_count(), 2 * 24);
    assert!(matches!(&recs[1].data, TensorData::F16 { dims, .. } if dims == &[24]));
    let bad = tilelut(&["quantize", "-i", s(&src), "-o", s(&dst), "--grouping", "conventional", "--coalesce"]);
    assert_eq!(code(&bad), 1);
}

#[test]
fn overrides_select_schemes_by_name() {
    let dir = tempfile::tempdir().unwrap();
    let (src, dst) = (dir.path().join("in.tqk"), dir.path().join("out.tqk"));
    let names = ["blk.0.attn_q", "blk.0.ffn_down", "blk.0.ffn_up", "blk.1.attn_q", "blk.1.ffn_down", "output"];
    let records: Vec<_> = names.iter().map(|n| f16_record(n, 32, 64)).collect();
    write_f16(&src, &records);
    let o = tilelut(&[
        "quantize", "-i", s(&src), "-o", s(&dst), "--override", "blk.1.*=q8_0", "--override", "blk.1.ffn_down=q4_0",
        "--override", "output=q8_0",
    ]);
    assert_eq!(code(&o), 0, "{o:?}");
    // Expected table written out by hand: FFN-down defaults to Q8_0, later flags win.
    let expected = [Scheme::Q4_0, Scheme::Q8_0, Scheme::Q4_0, Scheme::Q8_0, Scheme::Q4_0, Scheme::Q8_0];
    for (rec, want) in read_tensor_file(&dst).unwrap().iter().zip(expected) {
        let TensorData::Quant(q) = &rec.data else { panic!("not quantized") };
        assert_eq!(q.scheme(), want, "{}", rec.name);
    }
    let plain = tilelut(&["quantize", "-i", s(&src), "-o", s(&dst), "--no-default-overrides"]);
    assert_eq!(code(&plain), 0);
    assert!(read_tensor_file(&dst)
        .unwrap()
        .iter()
        .all(|r| matches!(&r.data, TensorData::Quant(q) if q.scheme() == Scheme::Q4_0)));
    assert_eq!(code(&tilelut(&["quantize", "-i", s(&src), "-o", s(&dst), "--override", "x=q5"])), 1);
}

#[test]
fn random_tensors_are_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.tqk"), dir.path().join("b.tqk"));
    for p in [&a, &b] {
        let o = tilelut(&["quantize", "--random", "w:70x33", "--random", "v:8x8", "--seed", "9", "-o", s(p)]);
        assert_eq!(code(&o), 0, "{o:?}");
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

/// Offset of the first payload byte of a single rank-2 record named `w`:
/// magic, version, name length, name, three tag bytes, two dims, payload length.
const PAYLOAD: usize = 4 + 4 + 4 + 1 + 3 + 16 + 8;

fn quantized_file(dir: &Path, coalesce: bool) -> (std::path::PathBuf, std::path::PathBuf) {
    let (src, dst) = (dir.join("in.tqk"), dir.join("out.tqk"));
    write_f16(&src, &[f16_record("w", 64, 64)]);
    let mut args = vec!["quantize", "-i", s(&src), "-o", s(&dst)];
    if coalesce {
        args.push("--coalesce");
    }
    assert_eq!(code(&tilelut(&args)), 0);
    (src, dst)
}

#[test]
fn verify_passes_valid_files() {
    let dir = tempfile::tempdir().unwrap();
    for coalesce in [false, true] {
        let (src, dst) = quantized_file(dir.path(), coalesce);
        let o = tilelut(&["verify", s(&dst), "--reference", s(&src)]);
        assert_eq!(code(&o), 0, "{}", stdout(&o));
        if coalesce {
            assert!(stdout(&o).contains("super_block_lossless"));
        }
    }
}

#[test]
fn verify_locates_a_flipped_code() {
    let dir = tempfile::tempdir().unwrap();
    let (src, dst) = quantized_file(dir.path(), false);
    let mut bytes = std::fs::read(&dst).unwrap();
    // group 5, fourth code byte
    bytes[PAYLOAD + 5 * 18 + 2 + 3] ^= 0x10;
    std::fs::write(&dst, &bytes).unwrap();
    let o = tilelut(&["verify", s(&dst), "--reference", s(&src)]);
    assert_eq!(code(&o), 1);
    // Group 5 holds tile offsets 160..192: rows 4 and 5, columns 16..32.
    let want = format!("group 5 (block at byte {}, row 4, col 16): codes differ", PAYLOAD + 5 * 18);
    assert!(stdout(&o).contains(&want), "{}", stdout(&o));
}

#[test]
fn verify_flags_a_nan_scale_without_reference() {
    let dir = tempfile::tempdir().unwrap();
    let (_, dst) = quantized_file(dir.path(), true);
    let mut bytes = std::fs::read(&dst).unwrap();
    // second super-block, third scale
    let at = PAYLOAD + 144 + 128 + 2 * 2;
    bytes[at..at + 2].copy_from_slice(&0x7e00u16.to_le_bytes());
    std::fs::write(&dst, &bytes).unwrap();
    let o = tilelut(&["verify", s(&dst)]);
    assert_eq!(code(&o), 1);
    let want = format!("canonical: group 10 (block at byte {}", PAYLOAD + 144);
    assert!(stdout(&o).contains(&want), "{}", stdout(&o));
}

#[test]
fn corrupt_and_missing_files_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let (_, dst) = quantized_file(dir.path(), false);
    let bytes = std::fs::read(&dst).unwrap();
    std::fs::write(&dst, &bytes[..bytes.len() - 1]).unwrap();
    let o = tilelut(&["verify", s(&dst)]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("truncated"));
    assert_eq!(code(&tilelut(&["verify", s(&dir.path().join("missing.tqk"))])), 2);
    let out_dir = dir.path().join("no/such/dir/x.tqk");
    assert_eq!(code(&tilelut(&["quantize", "--random", "w:4x4", "-o", s(&out_dir)])), 2);
}

fn bench(args: &[&str]) -> Value {
    let o = tilelut(args);
    assert_eq!(code(&o), 0, "{o:?}");
    serde_json::from_slice(&o.stdout).unwrap()
}

#[test]
fn bench_gemm_reports_visit_counts() {
    let r = bench(&["bench", "--kind", "gemm", "--shapes", "1x64x96,4x40x33", "--repeats", "1"]);
    let records = r["records"].as_array().unwrap();
    for shape in [(1usize, 64usize, 96usize), (4, 40, 33)] {
        let padded = (shape.1.div_ceil(32) * 32 * shape.2.div_ceil(32) * 32) as u64;
        let arm = |path: &str| {
            records
                .iter()
                .filter(|x| x["m"] == shape.0 && x["k"] == shape.1 && x["n"] == shape.2 && x["path"] == path)
                .collect::<Vec<_>>()
        };
        for tiled in arm("tiled") {
            assert_eq!(tiled["elements_visited"], padded);
            assert_eq!(tiled["positioned_writes"], 0);
        }
        let scatter = arm("scatter_baseline");
        assert_eq!(scatter.len(), 1);
        assert!(scatter[0]["positioned_writes"].as_u64().unwrap() >= (shape.1 * shape.2) as u64);
    }
}

#[test]
fn bench_attention_and_dequant_arms() {
    let r = bench(&["bench", "--kind", "attention", "--shapes", "4x128", "--repeats", "1"]);
    let recs = r["records"].as_array().unwrap();
    let lut = recs.iter().find(|x| x["exp"] == "lut").unwrap();
    let poly = recs.iter().find(|x| x["exp"] == "polynomial").unwrap();
    assert_eq!(lut["lut_lookups"], lut["exp_evaluations"]);
    assert_eq!(poly["lut_lookups"], 0);
    assert_eq!(poly["exp_evaluations"], lut["exp_evaluations"]);

    let r = bench(&["bench", "--kind", "dequant", "--shapes", "64x64", "--repeats", "1"]);
    let recs = r["records"].as_array().unwrap();
    assert_eq!(recs[0]["path"], "tiled");
    assert_eq!(recs[0]["positioned_writes"], 0);
    assert_eq!(recs[1]["positioned_writes"], 64 * 64);
}

#[test]
fn bench_zero_repeats_echoes_config() {
    let r = bench(&["bench", "--kind", "attention", "--shapes", "1x1024,16x16384", "--repeats", "0"]);
    assert_eq!(r["records"].as_array().unwrap().len(), 0);
    assert_eq!(r["config"]["shapes"], serde_json::json!([[1, 1024], [16, 16384]]));
    assert_eq!(code(&tilelut(&["bench", "--kind", "gemm", "--shapes", "1x64", "--repeats", "0"])), 1);
    assert_eq!(code(&tilelut(&["bench", "--kind", "attention", "--head-dim", "48", "--repeats", "0"])), 1);
}

#[test]
fn tts_sweep_is_deterministic_and_reported() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["tts", "--method", "beam", "--budgets", "1,2,4", "--seeds", "50", "--prm-sigma", "0.3"];
    let run = || {
        Command::new(env!("CARGO_BIN_EXE_tilelut"))
            .args(args)
            .env("TILELUT_REPORT_DIR", dir.path())
            .output()
            .unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(code(&a), 0, "{a:?}");
    assert_eq!(a.stdout, b.stdout);
    let csv = stdout(&a);
    assert!(csv.starts_with("method,budget,accuracy,ci_low,ci_high,seeds\n"));
    assert_eq!(csv.lines().count(), 4);
    assert_eq!(std::fs::read_to_string(dir.path().join("tts-beam.csv")).unwrap(), csv);
    let json: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("tts-beam.json")).unwrap()).unwrap();
    assert_eq!(json["rows"].as_array().unwrap().len(), 3);
}

#[test]
fn tts_json_matches_closed_form_at_budget_one() {
    let o = tilelut(&["tts", "--method", "bon", "--budgets", "1", "--seeds", "4000", "--format", "json"]);
    assert_eq!(code(&o), 0);
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    let row = &v["rows"][0];
    let (lo, hi) = (row["ci_low"].as_f64().unwrap(), row["ci_high"].as_f64().unwrap());
    assert!(lo <= 0.3 && 0.3 <= hi, "{row}");
}

#[test]
fn validation_errors_exit_1() {
    for args in [
        &["tts", "--method", "bon", "--budgets", "0"][..],
        &["tts", "--method", "greedy"],
        &["tts", "--method", "bon", "--p", "1.5"],
        &["quantize", "-o", "x.tqk"],
        &["quantize", "--bogus"],
        &["frobnicate"],
    ] {
        assert_eq!(code(&tilelut(args)), 1, "{args:?}");
    }
    assert_eq!(code(&tilelut(&["--help"])), 0);
}
