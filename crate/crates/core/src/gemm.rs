//! Emulated matrix-unit GEMM.
//!
//! Inputs are FP16 tiles, products are accumulated in an FP32 accumulator and
//! the per-column scale and bias are applied to the accumulator before a single
//! rounding to FP16:
//!
//! ```text
//! out[i][j] = f16(scale[j] * acc[i][j] + bias[j])
//! ```
//!
//! Accumulation order is fixed: K tiles in ascending order, and ascending `k`
//! within a tile, one running accumulator per output element. The product of
//! two FP16 values is exact in FP32, so the result is independent of FMA
//! contraction and of how output tiles are scheduled across threads.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::matrix::Matrix;
use crate::numerics::{f32_to_f16, Half};
use crate::quantize::{dequantize_to_tiled, Grouping, QuantError, QuantTensor, Scheme, GROUP_SIZE};
use crate::tile_layout::{intra_tile_coord, intra_tile_offset, TiledF16Matrix, TILE_DIM, TILE_ELEMS};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GemmError {
    #[error("inner dimensions differ: lhs is {m}x{k_lhs}, rhs is {k_rhs}x{n}")]
    DimMismatch {
        m: usize,
        k_lhs: usize,
        k_rhs: usize,
        n: usize,
    },
    #[error("per-channel {what} has {got} entries, expected {expected}")]
    ChannelLength {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error(transparent)]
    Quant(#[from] QuantError),
}

/// Per-output-column scale and bias fused into the accumulator readout.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TileGemmParams {
    pub per_channel_scale: Option<Vec<Half>>,
    pub per_channel_bias: Option<Vec<Half>>,
}

impl TileGemmParams {
    pub fn with_scale(mut self, scale: Vec<Half>) -> Self {
        self.per_channel_scale = Some(scale);
        self
    }

    pub fn with_bias(mut self, bias: Vec<Half>) -> Self {
        self.per_channel_bias = Some(bias);
        self
    }

    fn validate(&self, n: usize) -> Result<(), GemmError> {
        for (what, v) in [("scale", &self.per_channel_scale), ("bias", &self.per_channel_bias)] {
            if let Some(v) = v {
                if v.len() != n {
                    return Err(GemmError::ChannelLength {
                        what,
                        got: v.len(),
                        expected: n,
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DequantPath {
    /// Weights already in FP16 tiles.
    Dense,
    /// Tile-grouped blocks decoded straight into the weight tile buffer.
    Tiled,
    /// Conventional blocks decoded then scattered into tile order.
    ScatterBaseline,
}

/// Operation counts for one GEMM call.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GemmStats {
    pub path: DequantPath,
    /// Weight elements read or decoded, counted per element per pass.
    pub weight_elements_visited: u64,
    /// Element writes to computed tile offsets during dequantization.
    pub positioned_writes: u64,
    /// 16-entry table lookups during dequantization.
    pub lut_lookups: u64,
    /// Multiply-accumulates issued on padded tiles.
    pub macs: u64,
}

/// Row-major f32 copy of one tile.
fn tile_to_f32(tile: &[Half], out: &mut [f32; TILE_ELEMS]) {
    for (off, v) in tile.iter().enumerate() {
        let (r, c) = intra_tile_coord(off);
        out[r * TILE_DIM + c] = v.to_f32();
    }
}

/// `acc += a * w` for one 32x32x32 tile product, ascending `k`.
#[inline]
fn accumulate_tile(acc: &mut [f32; TILE_ELEMS], a: &[f32; TILE_ELEMS], w: &[f32; TILE_ELEMS]) {
    for i in 0..TILE_DIM {
        let acc_row = &mut acc[i * TILE_DIM..(i + 1) * TILE_DIM];
        for k in 0..TILE_DIM {
            let aik = a[i * TILE_DIM + k];
            let w_row = &w[k * TILE_DIM..(k + 1) * TILE_DIM];
            for (o, &wkj) in acc_row.iter_mut().zip(w_row) {
                *o += aik * wkj;
            }
        }
    }
}

struct GemmShape {
    m: usize,
    n: usize,
    tiles_m: usize,
    tiles_k: usize,
    tiles_n: usize,
}

/// Shared driver. `load_weight_tile(tk, tn, buf)` fills `buf` with the FP16
/// weight tile `(tk, tn)` in tile layout; it is called exactly once per
/// weight tile.
fn gemm_driver<F>(a: &TiledF16Matrix, shape: &GemmShape, p: &TileGemmParams, load_weight_tile: F) -> TiledF16Matrix
where
    F: Fn(usize, usize, &mut [Half]) + Sync,
{
    let GemmShape {
        m,
        n,
        tiles_m,
        tiles_k,
        tiles_n: _,
    } = *shape;

    // A as row-major f32 tiles, indexed [tk][tm].
    let a_tiles: Vec<[f32; TILE_ELEMS]> = (0..tiles_k * tiles_m)
        .into_par_iter()
        .map(|idx| {
            let (tk, tm) = (idx / tiles_m, idx % tiles_m);
            let mut buf = [0f32; TILE_ELEMS];
            tile_to_f32(a.tile(tm, tk), &mut buf);
            buf
        })
        .collect();

    let mut out = TiledF16Matrix::zeros(m, n).expect("non-empty output");
    out.as_mut_slice()
        .par_chunks_mut(tiles_m * TILE_ELEMS)
        .enumerate()
        .for_each(|(tn, out_col)| {
            let mut accs = vec![[0f32; TILE_ELEMS]; tiles_m];
            let mut w_half = [Half::ZERO; TILE_ELEMS];
            let mut w_f32 = [0f32; TILE_ELEMS];
            for tk in 0..tiles_k {
                load_weight_tile(tk, tn, &mut w_half);
                tile_to_f32(&w_half, &mut w_f32);
                for (tm, acc) in accs.iter_mut().enumerate() {
                    accumulate_tile(acc, &a_tiles[tk * tiles_m + tm], &w_f32);
                }
            }
            for (tm, (acc, out_tile)) in accs.iter().zip(out_col.chunks_mut(TILE_ELEMS)).enumerate() {
                for i in 0..TILE_DIM {
                    let row = tm * TILE_DIM + i;
                    if row >= m {
                        break;
                    }
                    for j in 0..TILE_DIM {
                        let col = tn * TILE_DIM + j;
                        if col >= n {
                            break;
                        }
                        let v = readout(acc[i * TILE_DIM + j], col, p);
                        out_tile[intra_tile_offset(i, j)] = v;
                    }
                }
            }
        });
    out
}

#[inline]
fn readout(acc: f32, col: usize, p: &TileGemmParams) -> Half {
    let mut v = acc;
    if let Some(s) = &p.per_channel_scale {
        v *= s[col].to_f32();
    }
    if let Some(b) = &p.per_channel_bias {
        v += b[col].to_f32();
    }
    f32_to_f16(v)
}

fn check_dims(a: &TiledF16Matrix, k: usize, n: usize, p: &TileGemmParams) -> Result<GemmShape, GemmError> {
    if a.cols() != k {
        return Err(GemmError::DimMismatch {
            m: a.rows(),
            k_lhs: a.cols(),
            k_rhs: k,
            n,
        });
    }
    p.validate(n)?;
    Ok(GemmShape {
        m: a.rows(),
        n,
        tiles_m: a.rows().div_ceil(TILE_DIM),
        tiles_k: k.div_ceil(TILE_DIM),
        tiles_n: n.div_ceil(TILE_DIM),
    })
}

fn macs(shape: &GemmShape) -> u64 {
    (shape.tiles_m * shape.tiles_k * shape.tiles_n * TILE_ELEMS * TILE_DIM) as u64
}

/// FP16 tile GEMM `a[M, K] x w[K, N]` with FP32 accumulation.
pub fn tile_gemm_f16(a: &TiledF16Matrix, w: &TiledF16Matrix, p: &TileGemmParams) -> Result<TiledF16Matrix, GemmError> {
    tile_gemm_f16_stats(a, w, p).map(|(o, _)| o)
}

pub fn tile_gemm_f16_stats(
    a: &TiledF16Matrix,
    w: &TiledF16Matrix,
    p: &TileGemmParams,
) -> Result<(TiledF16Matrix, GemmStats), GemmError> {
    let shape = check_dims(a, w.rows(), w.cols(), p)?;
    let out = gemm_driver(a, &shape, p, |tk, tn, buf| buf.copy_from_slice(w.tile(tk, tn)));
    let stats = GemmStats {
        path: DequantPath::Dense,
        weight_elements_visited: (w.padded_rows() * w.padded_cols()) as u64,
        positioned_writes: 0,
        lut_lookups: 0,
        macs: macs(&shape),
    };
    Ok((out, stats))
}

/// Mixed-precision GEMM over tile-grouped quantized weights.
///
/// Each weight tile is decoded from its 32 consecutive groups (4 super-blocks
/// when coalesced) into a tile buffer and consumed immediately. The result is
/// bit-identical to dequantizing the whole tensor and calling
/// [`tile_gemm_f16`].
pub fn gemm_quant(a: &TiledF16Matrix, wq: &QuantTensor, p: &TileGemmParams) -> Result<(TiledF16Matrix, GemmStats), GemmError> {
    if wq.grouping() != Grouping::Tile {
        return Err(QuantError::GroupingMismatch {
            expected: Grouping::Tile,
            found: wq.grouping(),
        }
        .into());
    }
    let shape = check_dims(a, wq.rows(), wq.cols(), p)?;
    let tiles_k = shape.tiles_k;
    let out = gemm_driver(a, &shape, p, |tk, tn, buf| {
        let tile_number = tn * tiles_k + tk;
        wq.decode_groups_into(tile_number * TILE_ELEMS / GROUP_SIZE, buf);
    });
    let visited = wq.padded_len() as u64;
    let stats = GemmStats {
        path: DequantPath::Tiled,
        weight_elements_visited: visited,
        positioned_writes: 0,
        lut_lookups: if wq.scheme() == Scheme::Q4_0 { visited } else { 0 },
        macs: macs(&shape),
    };
    Ok((out, stats))
}

/// Ablation baseline: conventional-group weights are fully dequantized and
/// scattered into tile order before the GEMM runs.
pub fn gemm_quant_scatter_baseline(
    a: &TiledF16Matrix,
    wq: &QuantTensor,
    p: &TileGemmParams,
) -> Result<(TiledF16Matrix, GemmStats), GemmError> {
    if wq.grouping() != Grouping::Conventional {
        return Err(QuantError::GroupingMismatch {
            expected: Grouping::Conventional,
            found: wq.grouping(),
        }
        .into());
    }
    check_dims(a, wq.rows(), wq.cols(), p)?;
    let (w, dq) = dequantize_to_tiled(wq);
    let (out, gs) = tile_gemm_f16_stats(a, &w, p)?;
    let stats = GemmStats {
        path: DequantPath::ScatterBaseline,
        weight_elements_visited: dq.elements_visited + gs.weight_elements_visited,
        positioned_writes: dq.positioned_writes,
        lut_lookups: dq.lut_lookups,
        macs: gs.macs,
    };
    Ok((out, stats))
}

/// Textbook triple loop in f64.
pub fn reference_gemm(a: &Matrix<f64>, w: &Matrix<f64>) -> Result<Matrix<f64>, GemmError> {
    if a.cols() != w.rows() {
        return Err(GemmError::DimMismatch {
            m: a.rows(),
            k_lhs: a.cols(),
            k_rhs: w.rows(),
            n: w.cols(),
        });
    }
    Ok(Matrix::from_fn(a.rows(), w.cols(), |i, j| {
        (0..a.cols()).map(|k| a.get(i, k) * w.get(k, j)).sum()
    }))
}

/// Per-element error of `out` against `reference`, normalized by
/// `sum_k |a_ik * w_kj|` (the magnitude the FP32 accumulator actually sees).
///
/// Returns the maximum over the logical output region.
pub fn max_normalized_error(out: &Matrix<Half>, reference: &Matrix<f64>, a: &Matrix<f64>, w: &Matrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..out.rows() {
        for j in 0..out.cols() {
            let mag: f64 = (0..a.cols()).map(|k| (a.get(i, k) * w.get(k, j)).abs()).sum();
            let err = (out.get(i, j).to_f64() - reference.get(i, j)).abs();
            let e = if mag == 0.0 {
                if err == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            } else {
                err / mag
            };
            worst = worst.max(e);
        }
    }
    worst
}
