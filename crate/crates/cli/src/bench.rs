use std::time::Instant;

use clap::{Args, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use tilelut::attention::{flash_attention_f16, AttentionConfig, ExpKernel, HeadTensor};
use tilelut::gemm::{gemm_quant, gemm_quant_scatter_baseline, tile_gemm_f16_stats, DequantPath, GemmStats, TileGemmParams};
use tilelut::quantize::{coalesce_super_blocks, dequantize_to_tiled, quantize_tensor, Grouping, Scheme};
use tilelut::tile_layout::to_tiled;
use tilelut::tts::derive_seed;
use tilelut::{ExpLut, Half, Matrix};

use crate::error::{invalid, CliError};
use crate::report::Reporter;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchKind {
    Gemm,
    Attention,
    Dequant,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_enum)]
    kind: BenchKind,
    /// `MxKxN` for gemm, `NqxNkv` for attention, `RxC` for dequant.
    #[arg(long, value_delimiter = ',')]
    shapes: Vec<String>,
    /// Timed runs per arm; 0 prints the resolved configuration only.
    #[arg(long, default_value_t = 3)]
    repeats: usize,
    #[arg(long, default_value = "q4_0")]
    scheme: Scheme,
    /// Attention head dimension.
    #[arg(long, default_value_t = 64)]
    head_dim: usize,
    /// Attention KV tile size.
    #[arg(long, default_value_t = 32)]
    block_kv: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Serialize)]
struct BenchConfig {
    kind: BenchKind,
    shapes: Vec<Vec<usize>>,
    repeats: usize,
    scheme: Scheme,
    head_dim: usize,
    block_kv: usize,
    seed: u64,
}

#[derive(Debug, Serialize)]
struct GemmRecord {
    m: usize,
    k: usize,
    n: usize,
    scheme: String,
    path: DequantPath,
    elements_visited: u64,
    positioned_writes: u64,
    lut_lookups: u64,
    macs: u64,
    elapsed_s: f64,
}

#[derive(Debug, Serialize)]
struct AttentionRecord {
    nq: usize,
    nkv: usize,
    head_dim: usize,
    exp: &'static str,
    exp_evaluations: u64,
    lut_lookups: u64,
    qk_macs: u64,
    pv_macs: u64,
    elapsed_s: f64,
}

#[derive(Debug, Serialize)]
struct DequantRecord {
    rows: usize,
    cols: usize,
    scheme: Scheme,
    path: &'static str,
    elements_visited: u64,
    positioned_writes: u64,
    lut_lookups: u64,
    elapsed_s: f64,
}

#[derive(Debug, Serialize)]
#[serde(untagged)]
enum Record {
    Gemm(GemmRecord),
    Attention(AttentionRecord),
    Dequant(DequantRecord),
}

#[derive(Debug, Serialize)]
struct BenchReport {
    config: BenchConfig,
    records: Vec<Record>,
}

fn default_shapes(kind: BenchKind) -> &'static [&'static str] {
    match kind {
        BenchKind::Gemm => &["1x512x512", "4x512x512", "16x512x512"],
        BenchKind::Attention => &["1x1024", "4x1024", "16x1024"],
        BenchKind::Dequant => &["512x512"],
    }
}

fn parse_shape(s: &str, rank: usize) -> Result<Vec<usize>, CliError> {
    let dims: Option<Vec<usize>> = s.split('x').map(|d| d.trim().parse().ok().filter(|&d| d > 0)).collect();
    match dims {
        Some(d) if d.len() == rank => Ok(d),
        _ => Err(CliError::validation(format!("shape `{s}` is not {rank} positive sizes joined by `x`"))),
    }
}

/// Median wall-clock seconds over `repeats` runs, plus the last result.
fn timed<T>(repeats: usize, mut f: impl FnMut() -> Result<T, CliError>) -> Result<(T, f64), CliError> {
    let mut times = Vec::with_capacity(repeats);
    let mut last = None;
    for _ in 0..repeats {
        let t = Instant::now();
        last = Some(f()?);
        times.push(t.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    Ok((last.expect("repeats > 0"), times[times.len() / 2]))
}

fn rand_f32(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f32> {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0f32..1.0))
}

fn gemm_record(shape: &[usize], scheme: &str, s: GemmStats, elapsed_s: f64) -> Record {
    Record::Gemm(GemmRecord {
        m: shape[0],
        k: shape[1],
        n: shape[2],
        scheme: scheme.to_string(),
        path: s.path,
        elements_visited: s.weight_elements_visited,
        positioned_writes: s.positioned_writes,
        lut_lookups: s.lut_lookups,
        macs: s.macs,
        elapsed_s,
    })
}

fn bench_gemm(cfg: &BenchConfig, shape: &[usize], rng: &mut ChaCha8Rng) -> Result<Vec<Record>, CliError> {
    let (m, k, n) = (shape[0], shape[1], shape[2]);
    let a = to_tiled(&rand_f32(m, k, rng).map(|&x| Half::from_f32(x))).map_err(invalid)?;
    let w = rand_f32(k, n, rng);
    let p = TileGemmParams::default();
    let mut out = Vec::new();

    let dense = to_tiled(&w.map(|&x| Half::from_f32(x))).map_err(invalid)?;
    let ((_, s), t) = timed(cfg.repeats, || tile_gemm_f16_stats(&a, &dense, &p).map_err(invalid))?;
    out.push(gemm_record(shape, "f16", s, t));

    let tiled = quantize_tensor(&w, cfg.scheme, Grouping::Tile).map_err(invalid)?;
    let ((_, s), t) = timed(cfg.repeats, || gemm_quant(&a, &tiled, &p).map_err(invalid))?;
    out.push(gemm_record(shape, &cfg.scheme.to_string(), s, t));

    if cfg.scheme == Scheme::Q4_0 {
        let sup = coalesce_super_blocks(&tiled).map_err(invalid)?;
        let ((_, s), t) = timed(cfg.repeats, || gemm_quant(&a, &sup, &p).map_err(invalid))?;
        out.push(gemm_record(shape, "q4_0_super", s, t));
    }

    let conv = quantize_tensor(&w, cfg.scheme, Grouping::Conventional).map_err(invalid)?;
    let ((_, s), t) = timed(cfg.repeats, || gemm_quant_scatter_baseline(&a, &conv, &p).map_err(invalid))?;
    out.push(gemm_record(shape, &cfg.scheme.to_string(), s, t));
    Ok(out)
}

fn bench_attention(cfg: &BenchConfig, shape: &[usize], rng: &mut ChaCha8Rng) -> Result<Vec<Record>, CliError> {
    let (nq, nkv, d) = (shape[0], shape[1], cfg.head_dim);
    let mut randn = |seq| HeadTensor::from_fn(1, seq, d, |_, _, _| Half::from_f32(rng.random_range(-2.0f32..2.0)));
    let (q, k, v) = (randn(nq), randn(nkv), randn(nkv));
    let lut = ExpLut::shared();
    let mut out = Vec::new();
    for (name, kernel) in [("lut", ExpKernel::Lut), ("polynomial", ExpKernel::Polynomial)] {
        let acfg = AttentionConfig::new(d).tiles(32, cfg.block_kv).exp_kernel(kernel);
        let (r, t) = timed(cfg.repeats, || flash_attention_f16(&q, &k, &v, &acfg, lut).map_err(invalid))?;
        out.push(Record::Attention(AttentionRecord {
            nq,
            nkv,
            head_dim: d,
            exp: name,
            exp_evaluations: r.stats.exp_evaluations,
            lut_lookups: r.stats.lut_lookups,
            qk_macs: r.stats.qk_macs,
            pv_macs: r.stats.pv_macs,
            elapsed_s: t,
        }));
    }
    Ok(out)
}

fn bench_dequant(cfg: &BenchConfig, shape: &[usize], rng: &mut ChaCha8Rng) -> Result<Vec<Record>, CliError> {
    let w = rand_f32(shape[0], shape[1], rng);
    let mut out = Vec::new();
    for (path, grouping) in [("tiled", Grouping::Tile), ("scatter_baseline", Grouping::Conventional)] {
        let q = quantize_tensor(&w, cfg.scheme, grouping).map_err(invalid)?;
        let ((_, s), t) = timed(cfg.repeats, || Ok(dequantize_to_tiled(&q)))?;
        out.push(Record::Dequant(DequantRecord {
            rows: shape[0],
            cols: shape[1],
            scheme: cfg.scheme,
            path,
            elements_visited: s.elements_visited,
            positioned_writes: s.positioned_writes,
            lut_lookups: s.lut_lookups,
            elapsed_s: t,
        }));
    }
    Ok(out)
}

pub fn run(args: &BenchArgs, reporter: &Reporter) -> Result<(), CliError> {
    let rank = if args.kind == BenchKind::Gemm { 3 } else { 2 };
    let raw: Vec<&str> = if args.shapes.is_empty() {
        default_shapes(args.kind).to_vec()
    } else {
        args.shapes.iter().map(String::as_str).collect()
    };
    let shapes = raw.iter().map(|s| parse_shape(s, rank)).collect::<Result<Vec<_>, _>>()?;
    if args.kind == BenchKind::Attention {
        if !args.head_dim.is_multiple_of(32) || args.head_dim == 0 {
            return Err(CliError::validation("--head-dim must be a positive multiple of 32"));
        }
        if !args.block_kv.is_multiple_of(32) || args.block_kv == 0 {
            return Err(CliError::validation("--block-kv must be a positive multiple of 32"));
        }
    }
    let config = BenchConfig {
        kind: args.kind,
        shapes,
        repeats: args.repeats,
        scheme: args.scheme,
        head_dim: args.head_dim,
        block_kv: args.block_kv,
        seed: args.seed,
    };

    let mut records = Vec::new();
    if config.repeats > 0 {
        for (i, shape) in config.shapes.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[i as u64]));
            records.extend(match config.kind {
                BenchKind::Gemm => bench_gemm(&config, shape, &mut rng)?,
                BenchKind::Attention => bench_attention(&config, shape, &mut rng)?,
                BenchKind::Dequant => bench_dequant(&config, shape, &mut rng)?,
            });
        }
    }
    let report = BenchReport { config, records };
    println!("{}", serde_json::to_string_pretty(&report).expect("report types serialize"));
    let kind = match args.kind {
        BenchKind::Gemm => "gemm",
        BenchKind::Attention => "attention",
        BenchKind::Dequant => "dequant",
    };
    let file = format!("bench-{kind}.json");
    reporter.write_json(&file, &report)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_parse_by_rank() {
        assert_eq!(parse_shape("1x64x32", 3).unwrap(), vec![1, 64, 32]);
        assert_eq!(parse_shape("4x1024", 2).unwrap(), vec![4, 1024]);
        for (s, r) in [("1x64", 3), ("0x64", 2), ("ax2", 2), ("1x2x3", 2), ("", 2)] {
            assert!(parse_shape(s, r).is_err(), "{s}");
        }
    }
}
