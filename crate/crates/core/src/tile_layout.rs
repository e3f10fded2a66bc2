//! Matrix-unit tile layout.
//!
//! A matrix is cut into 32x32 tiles, zero-padded to whole tiles. Tiles are
//! stored column-major at tile granularity (tile `(tr, tc)` is tile number
//! `tc * tile_rows + tr`), matching a tile-level inner product over the row
//! axis. Inside a tile every pair of rows is stored as a transposed 2x32
//! block, so element `(r, c)` sits at
//!
//! ```text
//! (r / 2) * 64 + 2 * c + (r % 2)
//! ```
//!
//! Any aligned run of 32 elements therefore covers a 2x16 rectangle of the
//! original matrix: rows `2p, 2p + 1` and 16 consecutive columns.

use crate::matrix::{Matrix, ShapeError};
use crate::numerics::Half;

pub const TILE_DIM: usize = 32;
pub const TILE_ELEMS: usize = TILE_DIM * TILE_DIM;
/// Bytes occupied by one FP16 tile.
pub const TILE_BYTES_F16: usize = TILE_ELEMS * 2;

#[inline]
pub fn pad_to_tile(n: usize) -> usize {
    n.div_ceil(TILE_DIM) * TILE_DIM
}

/// Offset of `(r, c)` inside a single tile, `r, c < 32`.
#[inline]
pub const fn intra_tile_offset(r: usize, c: usize) -> usize {
    (r / 2) * 64 + 2 * c + (r % 2)
}

/// Inverse of [`intra_tile_offset`].
#[inline]
pub const fn intra_tile_coord(offset: usize) -> (usize, usize) {
    let pair = offset / 64;
    let within = offset % 64;
    (pair * 2 + within % 2, within / 2)
}

/// Coordinate <-> offset map for a logical `rows x cols` matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileIndexMap {
    rows: usize,
    cols: usize,
    tile_rows: usize,
    tile_cols: usize,
}

impl TileIndexMap {
    pub fn new(rows: usize, cols: usize) -> Result<Self, ShapeError> {
        if rows == 0 || cols == 0 {
            return Err(ShapeError::Empty { rows, cols });
        }
        Ok(Self {
            rows,
            cols,
            tile_rows: rows.div_ceil(TILE_DIM),
            tile_cols: cols.div_ceil(TILE_DIM),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn tile_rows(&self) -> usize {
        self.tile_rows
    }

    pub fn tile_cols(&self) -> usize {
        self.tile_cols
    }

    pub fn tile_count(&self) -> usize {
        self.tile_rows * self.tile_cols
    }

    pub fn padded_rows(&self) -> usize {
        self.tile_rows * TILE_DIM
    }

    pub fn padded_cols(&self) -> usize {
        self.tile_cols * TILE_DIM
    }

    pub fn padded_len(&self) -> usize {
        self.tile_count() * TILE_ELEMS
    }

    /// Tile number of tile `(tr, tc)` in column-major tile order.
    #[inline]
    pub fn tile_number(&self, tr: usize, tc: usize) -> usize {
        tc * self.tile_rows + tr
    }

    /// Flat offset of `(r, c)`; valid for padded coordinates as well.
    #[inline]
    pub fn offset(&self, r: usize, c: usize) -> usize {
        let tile = self.tile_number(r / TILE_DIM, c / TILE_DIM);
        tile * TILE_ELEMS + intra_tile_offset(r % TILE_DIM, c % TILE_DIM)
    }

    /// Padded coordinate stored at `offset`.
    #[inline]
    pub fn padded_coord(&self, offset: usize) -> (usize, usize) {
        let tile = offset / TILE_ELEMS;
        let (tr, tc) = (tile % self.tile_rows, tile / self.tile_rows);
        let (r, c) = intra_tile_coord(offset % TILE_ELEMS);
        (tr * TILE_DIM + r, tc * TILE_DIM + c)
    }

    /// Logical coordinate at `offset`, or `None` for padding.
    pub fn coord(&self, offset: usize) -> Option<(usize, usize)> {
        if offset >= self.padded_len() {
            return None;
        }
        let (r, c) = self.padded_coord(offset);
        (r < self.rows && c < self.cols).then_some((r, c))
    }
}

/// Build the index map for a `rows x cols` matrix.
pub fn tile_index_map(rows: usize, cols: usize) -> Result<TileIndexMap, ShapeError> {
    TileIndexMap::new(rows, cols)
}

/// A matrix stored in tile layout. Padding elements hold `T::default()`.
#[derive(Debug, Clone, PartialEq)]
pub struct TiledMatrix<T> {
    map: TileIndexMap,
    data: Vec<T>,
}

pub type TiledF16Matrix = TiledMatrix<Half>;

impl<T: Copy + Default> TiledMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Result<Self, ShapeError> {
        let map = TileIndexMap::new(rows, cols)?;
        Ok(Self {
            data: vec![T::default(); map.padded_len()],
            map,
        })
    }
}

impl<T> TiledMatrix<T> {
    /// Wrap an already tiled buffer of `padded_len` elements.
    pub fn from_raw(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, ShapeError> {
        let map = TileIndexMap::new(rows, cols)?;
        if data.len() != map.padded_len() {
            return Err(ShapeError::Length {
                rows: map.padded_rows(),
                cols: map.padded_cols(),
                len: data.len(),
            });
        }
        Ok(Self { map, data })
    }

    pub fn map(&self) -> &TileIndexMap {
        &self.map
    }

    pub fn rows(&self) -> usize {
        self.map.rows
    }

    pub fn cols(&self) -> usize {
        self.map.cols
    }

    pub fn padded_rows(&self) -> usize {
        self.map.padded_rows()
    }

    pub fn padded_cols(&self) -> usize {
        self.map.padded_cols()
    }

    pub fn tile_count(&self) -> usize {
        self.map.tile_count()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    /// Size of the tile buffer in bytes.
    pub fn size_bytes(&self) -> usize {
        std::mem::size_of_val(self.data.as_slice())
    }

    /// The 1024 elements of tile `(tr, tc)`.
    pub fn tile(&self, tr: usize, tc: usize) -> &[T] {
        let start = self.map.tile_number(tr, tc) * TILE_ELEMS;
        &self.data[start..start + TILE_ELEMS]
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> &T {
        &self.data[self.map.offset(r, c)]
    }
}

/// Permute a row-major matrix into tile layout.
pub fn to_tiled<T: Copy + Default>(m: &Matrix<T>) -> Result<TiledMatrix<T>, ShapeError> {
    let mut out = TiledMatrix::zeros(m.rows(), m.cols())?;
    for r in 0..m.rows() {
        for (c, &v) in m.row(r).iter().enumerate() {
            let off = out.map.offset(r, c);
            out.data[off] = v;
        }
    }
    Ok(out)
}

/// Recover the logical row-major matrix, dropping padding.
pub fn from_tiled<T: Copy>(t: &TiledMatrix<T>) -> Matrix<T> {
    Matrix::from_fn(t.rows(), t.cols(), |r, c| *t.get(r, c))
}
