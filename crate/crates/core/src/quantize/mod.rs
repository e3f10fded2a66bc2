//! Group quantization of weight matrices.
//!
//! Two groupings are supported for a weight matrix `W[K, N]` (`K` is the
//! accumulation axis):
//!
//! * [`Grouping::Tile`] permutes `W` into the matrix-unit tile layout first
//!   and quantizes every aligned run of 32 elements, i.e. 2x16 rectangles of
//!   the original matrix. Dequantized output lands directly in tile order.
//! * [`Grouping::Conventional`] quantizes 32 consecutive elements down each
//!   column (column-major storage, `K` padded to a multiple of 32). Writing
//!   its output into tile order needs one positioned write per element.
//!
//! `Q4_0` tile-grouped tensors can be coalesced into 256-element
//! super-blocks; the repack is lossless.

pub mod blocks;
pub mod codebook;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::matrix::{Matrix, ShapeError};
use crate::numerics::{f32_to_f16, Half};
use crate::tile_layout::{pad_to_tile, to_tiled, TileIndexMap, TiledF16Matrix, TILE_DIM};

pub use blocks::{
    quantize_group_q4_0, quantize_group_q8_0, BlockQ4_0, BlockQ8_0, SuperBlockQ4, GROUP_SIZE,
    Q4_0_BYTES, Q8_0_BYTES, SUPER_GROUPS, SUPER_Q4_BYTES, SUPER_SIZE,
};
pub use codebook::{dequantize_block_lut, Codebook, DecodeLut16};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scheme {
    #[serde(rename = "q4_0")]
    Q4_0,
    #[serde(rename = "q8_0")]
    Q8_0,
}

impl Scheme {
    /// Bits per weight including the FP16 scale.
    pub fn bits_per_weight(self) -> f64 {
        match self {
            Scheme::Q4_0 => (Q4_0_BYTES * 8) as f64 / GROUP_SIZE as f64,
            Scheme::Q8_0 => (Q8_0_BYTES * 8) as f64 / GROUP_SIZE as f64,
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scheme::Q4_0 => "q4_0",
            Scheme::Q8_0 => "q8_0",
        })
    }
}

impl std::str::FromStr for Scheme {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "q4_0" | "q4" => Ok(Scheme::Q4_0),
            "q8_0" | "q8" => Ok(Scheme::Q8_0),
            other => Err(format!("unknown scheme `{other}` (expected q4_0 or q8_0)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grouping {
    Conventional,
    Tile,
}

impl std::fmt::Display for Grouping {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Grouping::Conventional => "conventional",
            Grouping::Tile => "tile",
        })
    }
}

impl std::str::FromStr for Grouping {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "tile" | "tile_group" => Ok(Grouping::Tile),
            "conventional" | "conventional_group" => Ok(Grouping::Conventional),
            other => Err(format!("unknown grouping `{other}` (expected tile or conventional)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum QuantError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("expected {expected} tensor, found {found}")]
    SchemeMismatch { expected: Scheme, found: Scheme },
    #[error("operation requires {expected} grouping, tensor uses {found}")]
    GroupingMismatch { expected: Grouping, found: Grouping },
    #[error("tensor is already coalesced")]
    AlreadyCoalesced,
    #[error("tensor is not coalesced")]
    NotCoalesced,
    #[error("group count {groups} is not a multiple of {SUPER_GROUPS}")]
    NotDivisible { groups: usize },
    #[error("expected {expected} groups for a {rows}x{cols} {grouping} tensor, got {actual}")]
    BlockCount {
        rows: usize,
        cols: usize,
        grouping: Grouping,
        expected: usize,
        actual: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum QuantBlocks {
    Q4_0(Vec<BlockQ4_0>),
    Q8_0(Vec<BlockQ8_0>),
    Q4Super(Vec<SuperBlockQ4>),
}

impl QuantBlocks {
    /// Number of 32-element groups.
    pub fn group_count(&self) -> usize {
        match self {
            QuantBlocks::Q4_0(b) => b.len(),
            QuantBlocks::Q8_0(b) => b.len(),
            QuantBlocks::Q4Super(b) => b.len() * SUPER_GROUPS,
        }
    }

    pub fn scheme(&self) -> Scheme {
        match self {
            QuantBlocks::Q8_0(_) => Scheme::Q8_0,
            _ => Scheme::Q4_0,
        }
    }

    pub fn byte_len(&self) -> usize {
        match self {
            QuantBlocks::Q4_0(b) => b.len() * Q4_0_BYTES,
            QuantBlocks::Q8_0(b) => b.len() * Q8_0_BYTES,
            QuantBlocks::Q4Super(b) => b.len() * SUPER_Q4_BYTES,
        }
    }
}

/// Padded storage shape for a grouping.
pub fn padded_dims(rows: usize, cols: usize, grouping: Grouping) -> (usize, usize) {
    match grouping {
        Grouping::Tile => (pad_to_tile(rows), pad_to_tile(cols)),
        Grouping::Conventional => (rows.div_ceil(GROUP_SIZE) * GROUP_SIZE, cols),
    }
}

/// A group-quantized weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantTensor {
    rows: usize,
    cols: usize,
    grouping: Grouping,
    codebook: Codebook,
    blocks: QuantBlocks,
}

impl QuantTensor {
    pub fn new(rows: usize, cols: usize, grouping: Grouping, blocks: QuantBlocks) -> Result<Self, QuantError> {
        if rows == 0 || cols == 0 {
            return Err(ShapeError::Empty { rows, cols }.into());
        }
        let (pr, pc) = padded_dims(rows, cols, grouping);
        let expected = pr * pc / GROUP_SIZE;
        if blocks.group_count() != expected {
            return Err(QuantError::BlockCount {
                rows,
                cols,
                grouping,
                expected,
                actual: blocks.group_count(),
            });
        }
        if matches!(blocks, QuantBlocks::Q4Super(_)) && grouping != Grouping::Tile {
            return Err(QuantError::GroupingMismatch {
                expected: Grouping::Tile,
                found: grouping,
            });
        }
        Ok(Self {
            rows,
            cols,
            grouping,
            codebook: Codebook::Linear,
            blocks,
        })
    }

    /// Swap the 4-bit decode table. Codes and scales are untouched.
    pub fn with_codebook(mut self, codebook: Codebook) -> Self {
        self.codebook = codebook;
        self
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn grouping(&self) -> Grouping {
        self.grouping
    }

    pub fn codebook(&self) -> Codebook {
        self.codebook
    }

    pub fn scheme(&self) -> Scheme {
        self.blocks.scheme()
    }

    pub fn is_coalesced(&self) -> bool {
        matches!(self.blocks, QuantBlocks::Q4Super(_))
    }

    pub fn blocks(&self) -> &QuantBlocks {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut QuantBlocks {
        &mut self.blocks
    }

    pub fn padded_dims(&self) -> (usize, usize) {
        padded_dims(self.rows, self.cols, self.grouping)
    }

    pub fn padded_len(&self) -> usize {
        let (pr, pc) = self.padded_dims();
        pr * pc
    }

    pub fn group_count(&self) -> usize {
        self.blocks.group_count()
    }

    pub fn byte_len(&self) -> usize {
        self.blocks.byte_len()
    }

    /// Storage bits per logical (unpadded) weight.
    pub fn bits_per_weight(&self) -> f64 {
        (self.byte_len() * 8) as f64 / (self.rows * self.cols) as f64
    }

    /// Logical coordinate of storage offset `offset`, `None` for padding.
    pub fn storage_coord(&self, offset: usize) -> Option<(usize, usize)> {
        match self.grouping {
            Grouping::Tile => TileIndexMap::new(self.rows, self.cols).ok()?.coord(offset),
            Grouping::Conventional => {
                let (pr, _) = self.padded_dims();
                let (r, c) = (offset % pr, offset / pr);
                (r < self.rows && c < self.cols).then_some((r, c))
            }
        }
    }

    /// Decode `out.len() / 32` consecutive groups starting at `first_group`
    /// into FP16, in storage order.
    pub fn decode_groups_into(&self, first_group: usize, out: &mut [Half]) {
        debug_assert_eq!(out.len() % GROUP_SIZE, 0);
        match &self.blocks {
            QuantBlocks::Q4_0(blocks) => {
                let lut = self.codebook.lut();
                for (b, o) in blocks[first_group..].iter().zip(out.chunks_mut(GROUP_SIZE)) {
                    dequantize_block_lut(&b.codes(), &[b.scale], &lut, o);
                }
            }
            QuantBlocks::Q8_0(blocks) => {
                for (b, o) in blocks[first_group..].iter().zip(out.chunks_mut(GROUP_SIZE)) {
                    o.copy_from_slice(&b.dequantize());
                }
            }
            QuantBlocks::Q4Super(supers) => {
                let lut = self.codebook.lut();
                let mut group = first_group;
                let mut out = out;
                while !out.is_empty() {
                    let sb = &supers[group / SUPER_GROUPS];
                    let g0 = group % SUPER_GROUPS;
                    let n = (SUPER_GROUPS - g0).min(out.len() / GROUP_SIZE);
                    let codes = sb.codes();
                    let (head, tail) = out.split_at_mut(n * GROUP_SIZE);
                    dequantize_block_lut(
                        &codes[g0 * GROUP_SIZE..(g0 + n) * GROUP_SIZE],
                        &sb.scales[g0..g0 + n],
                        &lut,
                        head,
                    );
                    out = tail;
                    group += n;
                }
            }
        }
    }

    /// FP16 dequantization of every group, in storage order.
    pub fn dequantize_storage(&self) -> Vec<Half> {
        let mut out = vec![Half::ZERO; self.padded_len()];
        let chunk = if self.is_coalesced() { SUPER_SIZE } else { GROUP_SIZE };
        out.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, o)| self.decode_groups_into(i * chunk / GROUP_SIZE, o));
        out
    }

    /// Exact `f32` decode in storage order (linear codebook semantics for
    /// Q4, i.e. `(code - 8) * scale`, regardless of [`Self::codebook`]).
    pub fn decode_storage_f32(&self) -> Vec<f32> {
        match &self.blocks {
            QuantBlocks::Q4_0(b) => b.iter().flat_map(|b| b.decode_f32()).collect(),
            QuantBlocks::Q8_0(b) => b.iter().flat_map(|b| b.decode_f32()).collect(),
            QuantBlocks::Q4Super(s) => s
                .iter()
                .flat_map(|s| s.split())
                .flat_map(|b| b.decode_f32())
                .collect(),
        }
    }
}

/// Rearrange `m` into the storage order of `grouping`, zero-padded.
pub fn storage_order(m: &Matrix<f32>, grouping: Grouping) -> Result<Vec<f32>, ShapeError> {
    match grouping {
        Grouping::Tile => Ok(to_tiled(m)?.into_vec()),
        Grouping::Conventional => {
            if m.rows() == 0 || m.cols() == 0 {
                return Err(ShapeError::Empty {
                    rows: m.rows(),
                    cols: m.cols(),
                });
            }
            let (pr, pc) = padded_dims(m.rows(), m.cols(), grouping);
            let mut out = vec![0.0f32; pr * pc];
            for r in 0..m.rows() {
                for (c, &v) in m.row(r).iter().enumerate() {
                    out[c * pr + r] = v;
                }
            }
            Ok(out)
        }
    }
}

/// Quantize a row-major weight matrix `[K, N]` group by group in the storage
/// order of `grouping`.
pub fn quantize_tensor(m: &Matrix<f32>, scheme: Scheme, grouping: Grouping) -> Result<QuantTensor, QuantError> {
    let values = storage_order(m, grouping)?;
    let groups = values.par_chunks_exact(GROUP_SIZE);
    let blocks = match scheme {
        Scheme::Q4_0 => QuantBlocks::Q4_0(
            groups
                .map(|g| quantize_group_q4_0(g.try_into().expect("group of 32")))
                .collect(),
        ),
        Scheme::Q8_0 => QuantBlocks::Q8_0(
            groups
                .map(|g| quantize_group_q8_0(g.try_into().expect("group of 32")))
                .collect(),
        ),
    };
    QuantTensor::new(m.rows(), m.cols(), grouping, blocks)
}

/// Convenience wrapper for FP16 weights.
pub fn quantize_tensor_f16(m: &Matrix<Half>, scheme: Scheme, grouping: Grouping) -> Result<QuantTensor, QuantError> {
    quantize_tensor(&m.map(|v| v.to_f32()), scheme, grouping)
}

/// Pack every eight consecutive Q4_0 groups into one super-block.
pub fn coalesce_super_blocks(q: &QuantTensor) -> Result<QuantTensor, QuantError> {
    if q.grouping != Grouping::Tile {
        return Err(QuantError::GroupingMismatch {
            expected: Grouping::Tile,
            found: q.grouping,
        });
    }
    let blocks = match &q.blocks {
        QuantBlocks::Q4_0(b) => b,
        QuantBlocks::Q8_0(_) => {
            return Err(QuantError::SchemeMismatch {
                expected: Scheme::Q4_0,
                found: Scheme::Q8_0,
            })
        }
        QuantBlocks::Q4Super(_) => return Err(QuantError::AlreadyCoalesced),
    };
    if blocks.len() % SUPER_GROUPS != 0 {
        return Err(QuantError::NotDivisible { groups: blocks.len() });
    }
    let supers = blocks
        .chunks_exact(SUPER_GROUPS)
        .map(|c| SuperBlockQ4::coalesce(c.try_into().expect("8 blocks")))
        .collect();
    Ok(QuantTensor {
        blocks: QuantBlocks::Q4Super(supers),
        ..q.clone()
    })
}

/// Inverse of [`coalesce_super_blocks`].
pub fn split_super_blocks(q: &QuantTensor) -> Result<QuantTensor, QuantError> {
    match &q.blocks {
        QuantBlocks::Q4Super(s) => Ok(QuantTensor {
            blocks: QuantBlocks::Q4_0(s.iter().flat_map(|s| s.split()).collect()),
            ..q.clone()
        }),
        _ => Err(QuantError::NotCoalesced),
    }
}

/// Column-major FP16 matrix produced by conventional-group dequantization.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnMajorF16 {
    pub rows: usize,
    pub cols: usize,
    pub padded_rows: usize,
    pub data: Vec<Half>,
}

impl ColumnMajorF16 {
    pub fn to_row_major(&self) -> Matrix<Half> {
        Matrix::from_fn(self.rows, self.cols, |r, c| self.data[c * self.padded_rows + r])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DequantizedTensor {
    Tiled(TiledF16Matrix),
    ColumnMajor(ColumnMajorF16),
}

impl DequantizedTensor {
    pub fn to_row_major(&self) -> Matrix<Half> {
        match self {
            DequantizedTensor::Tiled(t) => crate::tile_layout::from_tiled(t),
            DequantizedTensor::ColumnMajor(c) => c.to_row_major(),
        }
    }
}

/// Dequantize into the tensor's native storage order.
pub fn dequantize_tensor(q: &QuantTensor) -> DequantizedTensor {
    let data = q.dequantize_storage();
    match q.grouping {
        Grouping::Tile => DequantizedTensor::Tiled(
            TiledF16Matrix::from_raw(q.rows, q.cols, data).expect("storage length matches tile shape"),
        ),
        Grouping::Conventional => DequantizedTensor::ColumnMajor(ColumnMajorF16 {
            rows: q.rows,
            cols: q.cols,
            padded_rows: q.padded_dims().0,
            data,
        }),
    }
}

/// Element-level operation counts for the dequantization paths.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DequantStats {
    /// Weight elements decoded (each storage element counted once per decode).
    pub elements_visited: u64,
    /// Writes to a computed, non-sequential tile offset.
    pub positioned_writes: u64,
    /// 16-entry table lookups.
    pub lut_lookups: u64,
}

impl std::ops::AddAssign for DequantStats {
    fn add_assign(&mut self, o: Self) {
        self.elements_visited += o.elements_visited;
        self.positioned_writes += o.positioned_writes;
        self.lut_lookups += o.lut_lookups;
    }
}

/// Dequantize into tile layout for the matrix unit.
///
/// Tile-grouped tensors decode straight into place. Conventional tensors
/// take the scatter path: every decoded element is written to the offset the
/// tile map assigns it.
pub fn dequantize_to_tiled(q: &QuantTensor) -> (TiledF16Matrix, DequantStats) {
    let storage = q.dequantize_storage();
    let n = storage.len() as u64;
    let lut_lookups = if q.scheme() == Scheme::Q4_0 { n } else { 0 };
    match q.grouping {
        Grouping::Tile => {
            let t = TiledF16Matrix::from_raw(q.rows, q.cols, storage).expect("tile shape");
            let stats = DequantStats {
                elements_visited: n,
                positioned_writes: 0,
                lut_lookups,
            };
            (t, stats)
        }
        Grouping::Conventional => {
            let mut t = TiledF16Matrix::zeros(q.rows, q.cols).expect("non-empty");
            let map = *t.map();
            let pr = q.padded_dims().0;
            let dst = t.as_mut_slice();
            let mut writes = 0u64;
            for (off, v) in storage.into_iter().enumerate() {
                let (r, c) = (off % pr, off / pr);
                // Conventional padding rows beyond the tile padding do not exist,
                // since both pad rows to a multiple of 32.
                debug_assert!(r < map.padded_rows());
                dst[map.offset(r, c)] = v;
                writes += 1;
            }
            let stats = DequantStats {
                elements_visited: n,
                positioned_writes: writes,
                lut_lookups,
            };
            (t, stats)
        }
    }
}

/// Mean squared quantization error over the logical (unpadded) elements,
/// using the exact f32 decode.
pub fn quantization_mse(m: &Matrix<f32>, q: &QuantTensor) -> f64 {
    let decoded = q.decode_storage_f32();
    let mut sum = 0.0f64;
    for (off, &d) in decoded.iter().enumerate() {
        if let Some((r, c)) = q.storage_coord(off) {
            let e = (*m.get(r, c) - d) as f64;
            sum += e * e;
        }
    }
    sum / (m.rows() * m.cols()) as f64
}

/// Re-quantize the dequantized values of `q` and compare block bytes.
///
/// Round-to-nearest quantization is idempotent on its own output, so any
/// block that does not reproduce itself was not produced by
/// [`quantize_tensor`]. Returns the indices of such groups.
pub fn non_canonical_groups(q: &QuantTensor) -> Vec<usize> {
    let decoded = q.decode_storage_f32();
    let groups = decoded.chunks_exact(GROUP_SIZE);
    match &q.blocks {
        QuantBlocks::Q4_0(b) => groups
            .zip(b)
            .enumerate()
            .filter(|(_, (g, b))| quantize_group_q4_0((*g).try_into().unwrap()) != **b || !b.scale.is_finite())
            .map(|(i, _)| i)
            .collect(),
        QuantBlocks::Q8_0(b) => groups
            .zip(b)
            .enumerate()
            .filter(|(_, (g, b))| quantize_group_q8_0((*g).try_into().unwrap()) != **b || !b.scale.is_finite())
            .map(|(i, _)| i)
            .collect(),
        QuantBlocks::Q4Super(s) => {
            let split: Vec<BlockQ4_0> = s.iter().flat_map(|s| s.split()).collect();
            groups
                .zip(&split)
                .enumerate()
                .filter(|(_, (g, b))| quantize_group_q4_0((*g).try_into().unwrap()) != **b || !b.scale.is_finite())
                .map(|(i, _)| i)
                .collect()
        }
    }
}

/// Round an `f32` matrix through FP16.
pub fn round_to_f16(m: &Matrix<f32>) -> Matrix<Half> {
    m.map(|&v| f32_to_f16(v))
}

// Tile padding makes every tensor a whole number of 32x32 tiles, and each tile
// holds 32 groups, so tile-grouped Q4_0 tensors are always coalescible.
const _: () = assert!((TILE_DIM * TILE_DIM / GROUP_SIZE).is_multiple_of(SUPER_GROUPS));
