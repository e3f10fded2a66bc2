//! The `TQK1` tensor container.
//!
//! ```text
//! "TQK1"  version:u32
//! record* until EOF:
//!   name_len:u32  name:utf-8  dtype:u8  grouping:u8  rank:u8
//!   dims:u64 * rank  payload_len:u64  payload
//! ```
//!
//! All integers are little-endian. dtype is F16=0, Q4_0=1, Q8_0=2,
//! Q4_0_SUPER=3. grouping is conventional=0, tile=1; for F16 it selects
//! row-major (0) or tiled (1) element order. F16 payloads are raw LE halves
//! (tiled payloads include the zero padding); quantized payloads are blocks in
//! storage order. Quantized and tiled tensors have rank 2.

use std::io::Write;
use std::path::Path;

use crate::numerics::Half;
use crate::quantize::{
    padded_dims, BlockQ4_0, BlockQ8_0, Grouping, QuantBlocks, QuantTensor, SuperBlockQ4, GROUP_SIZE, Q4_0_BYTES,
    Q8_0_BYTES, SUPER_Q4_BYTES, SUPER_SIZE,
};
use crate::tile_layout::TiledF16Matrix;

pub const MAGIC: [u8; 4] = *b"TQK1";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum TensorIoError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:02x?}, expected \"TQK1\"")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated at byte {offset}: need {needed} more bytes for {what}")]
    Truncated {
        offset: usize,
        needed: usize,
        what: &'static str,
    },
    #[error("tensor `{name}`: unknown dtype tag {tag}")]
    UnknownDtype { name: String, tag: u8 },
    #[error("tensor `{name}`: unknown grouping tag {tag}")]
    UnknownGrouping { name: String, tag: u8 },
    #[error("tensor `{name}`: payload is {got} bytes, shape implies {expected}")]
    SizeMismatch { name: String, expected: u64, got: u64 },
    #[error("record at byte {offset}: name is not valid UTF-8")]
    InvalidName { offset: usize },
    #[error("tensor `{name}`: invalid shape {dims:?}: {reason}")]
    InvalidShape {
        name: String,
        dims: Vec<u64>,
        reason: &'static str,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F16 = 0,
    Q4_0 = 1,
    Q8_0 = 2,
    Q4_0Super = 3,
}

impl DType {
    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => DType::F16,
            1 => DType::Q4_0,
            2 => DType::Q8_0,
            3 => DType::Q4_0Super,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    /// Row-major FP16 of any rank.
    F16 { dims: Vec<usize>, data: Vec<Half> },
    F16Tiled(TiledF16Matrix),
    Quant(QuantTensor),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F16 { .. } | TensorData::F16Tiled(_) => DType::F16,
            TensorData::Quant(q) => match q.blocks() {
                QuantBlocks::Q4_0(_) => DType::Q4_0,
                QuantBlocks::Q8_0(_) => DType::Q8_0,
                QuantBlocks::Q4Super(_) => DType::Q4_0Super,
            },
        }
    }

    fn grouping_tag(&self) -> u8 {
        match self {
            TensorData::F16 { .. } => 0,
            TensorData::F16Tiled(_) => 1,
            TensorData::Quant(q) => match q.grouping() {
                Grouping::Conventional => 0,
                Grouping::Tile => 1,
            },
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        match self {
            TensorData::F16 { dims, .. } => dims.clone(),
            TensorData::F16Tiled(t) => vec![t.rows(), t.cols()],
            TensorData::Quant(q) => vec![q.rows(), q.cols()],
        }
    }

    /// Payload size in bytes.
    pub fn payload_len(&self) -> usize {
        match self {
            TensorData::F16 { data, .. } => data.len() * 2,
            TensorData::F16Tiled(t) => t.size_bytes(),
            TensorData::Quant(q) => q.byte_len(),
        }
    }

    fn write_payload(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F16 { data, .. } => data.iter().for_each(|h| out.extend_from_slice(&h.to_le_bytes())),
            TensorData::F16Tiled(t) => t.as_slice().iter().for_each(|h| out.extend_from_slice(&h.to_le_bytes())),
            TensorData::Quant(q) => match q.blocks() {
                QuantBlocks::Q4_0(b) => b.iter().for_each(|b| out.extend_from_slice(&b.to_bytes())),
                QuantBlocks::Q8_0(b) => b.iter().for_each(|b| out.extend_from_slice(&b.to_bytes())),
                QuantBlocks::Q4Super(b) => b.iter().for_each(|b| out.extend_from_slice(&b.to_bytes())),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub data: TensorData,
}

impl TensorRecord {
    pub fn new(name: impl Into<String>, data: TensorData) -> Self {
        Self {
            name: name.into(),
            data,
        }
    }
}

/// Serialize records into a complete file image.
pub fn encode_tensor_file(records: &[TensorRecord]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + records.iter().map(|r| 64 + r.data.payload_len()).sum::<usize>());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for r in records {
        let dims = r.data.dims();
        out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.push(r.data.dtype() as u8);
        out.push(r.data.grouping_tag());
        out.push(dims.len() as u8);
        for d in &dims {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        out.extend_from_slice(&(r.data.payload_len() as u64).to_le_bytes());
        r.data.write_payload(&mut out);
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], TensorIoError> {
        let remaining = self.bytes.len() - self.pos;
        if n > remaining {
            return Err(TensorIoError::Truncated {
                offset: self.bytes.len(),
                needed: n - remaining,
                what,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self, what: &'static str) -> Result<[u8; N], TensorIoError> {
        Ok(self.take(N, what)?.try_into().expect("length checked"))
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, TensorIoError> {
        Ok(self.array::<1>(what)?[0])
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, TensorIoError> {
        self.array(what).map(u32::from_le_bytes)
    }

    fn u64(&mut self, what: &'static str) -> Result<u64, TensorIoError> {
        self.array(what).map(u64::from_le_bytes)
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn halves(payload: &[u8]) -> Vec<Half> {
    payload
        .chunks_exact(2)
        .map(|c| Half::from_le_bytes([c[0], c[1]]))
        .collect()
}

fn blocks<const N: usize, B>(payload: &[u8], from: impl Fn(&[u8; N]) -> B) -> Vec<B> {
    payload
        .chunks_exact(N)
        .map(|c| from(c.try_into().expect("exact chunk")))
        .collect()
}

fn read_record(cur: &mut Cursor<'_>) -> Result<TensorRecord, TensorIoError> {
    let start = cur.pos;
    let name_len = cur.u32("name length")? as usize;
    let name = std::str::from_utf8(cur.take(name_len, "name")?)
        .map_err(|_| TensorIoError::InvalidName { offset: start })?
        .to_owned();
    let dtype_tag = cur.u8("dtype")?;
    let grouping_tag = cur.u8("grouping")?;
    let rank = cur.u8("rank")? as usize;
    let mut dims = Vec::with_capacity(rank);
    for _ in 0..rank {
        dims.push(cur.u64("dims")?);
    }
    let payload_len = cur.u64("payload length")?;

    let dtype = DType::from_tag(dtype_tag).ok_or_else(|| TensorIoError::UnknownDtype {
        name: name.clone(),
        tag: dtype_tag,
    })?;
    let grouping = match grouping_tag {
        0 => Grouping::Conventional,
        1 => Grouping::Tile,
        tag => return Err(TensorIoError::UnknownGrouping { name, tag }),
    };
    let bad_shape = |reason| TensorIoError::InvalidShape {
        name: name.clone(),
        dims: dims.clone(),
        reason,
    };
    if rank == 0 || dims.contains(&0) {
        return Err(bad_shape("empty tensor"));
    }
    if (dtype != DType::F16 || grouping == Grouping::Tile) && rank != 2 {
        return Err(bad_shape("quantized and tiled tensors must have rank 2"));
    }
    let udims: Vec<usize> = dims
        .iter()
        .map(|&d| usize::try_from(d))
        .collect::<Result<_, _>>()
        .map_err(|_| bad_shape("dimension overflows usize"))?;
    let elements = udims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| bad_shape("element count overflows"))?;

    let expected = match (dtype, grouping) {
        (DType::F16, Grouping::Conventional) => elements.checked_mul(2),
        _ => {
            let (pr, pc) = match dtype {
                DType::F16 => padded_dims(udims[0], udims[1], Grouping::Tile),
                _ => padded_dims(udims[0], udims[1], grouping),
            };
            pr.checked_mul(pc).and_then(|padded| match dtype {
                DType::F16 => padded.checked_mul(2),
                DType::Q4_0 => Some(padded / GROUP_SIZE * Q4_0_BYTES),
                DType::Q8_0 => Some(padded / GROUP_SIZE * Q8_0_BYTES),
                DType::Q4_0Super => Some(padded.div_ceil(SUPER_SIZE) * SUPER_Q4_BYTES),
            })
        }
    }
    .ok_or_else(|| bad_shape("payload size overflows"))? as u64;
    if payload_len != expected {
        return Err(TensorIoError::SizeMismatch {
            name,
            expected,
            got: payload_len,
        });
    }
    let payload = cur.take(expected as usize, "payload")?;

    let data = match (dtype, grouping) {
        (DType::F16, Grouping::Conventional) => TensorData::F16 {
            dims: udims,
            data: halves(payload),
        },
        (DType::F16, Grouping::Tile) => TensorData::F16Tiled(
            TiledF16Matrix::from_raw(udims[0], udims[1], halves(payload)).map_err(|_| bad_shape("tile buffer"))?,
        ),
        _ => {
            let blocks = match dtype {
                DType::Q4_0 => QuantBlocks::Q4_0(blocks(payload, BlockQ4_0::from_bytes)),
                DType::Q8_0 => QuantBlocks::Q8_0(blocks(payload, BlockQ8_0::from_bytes)),
                _ => QuantBlocks::Q4Super(blocks(payload, SuperBlockQ4::from_bytes)),
            };
            TensorData::Quant(
                QuantTensor::new(udims[0], udims[1], grouping, blocks)
                    .map_err(|_| bad_shape("block count does not match the grouping"))?,
            )
        }
    };
    Ok(TensorRecord { name, data })
}

/// Parse a complete file image.
pub fn decode_tensor_file(bytes: &[u8]) -> Result<Vec<TensorRecord>, TensorIoError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.array::<4>("magic")?;
    if magic != MAGIC {
        return Err(TensorIoError::BadMagic(magic));
    }
    let version = cur.u32("version")?;
    if version != VERSION {
        return Err(TensorIoError::UnsupportedVersion(version));
    }
    let mut records = Vec::new();
    while !cur.at_end() {
        records.push(read_record(&mut cur)?);
    }
    Ok(records)
}

/// Write atomically: the file appears complete or not at all.
pub fn write_tensor_file(path: impl AsRef<Path>, records: &[TensorRecord]) -> Result<(), TensorIoError> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(&encode_tensor_file(records))?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

pub fn read_tensor_file(path: impl AsRef<Path>) -> Result<Vec<TensorRecord>, TensorIoError> {
    decode_tensor_file(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;
    use crate::quantize::{coalesce_super_blocks, quantize_tensor, Scheme};

    fn gradient(rows: usize, cols: usize) -> Matrix<f32> {
        Matrix::from_fn(rows, cols, |r, c| (r as f32 - c as f32) * 0.03)
    }

    #[test]
    fn header_only_file_is_empty() {
        let bytes = encode_tensor_file(&[]);
        assert_eq!(bytes, b"TQK1\x01\x00\x00\x00");
        assert!(decode_tensor_file(&bytes).unwrap().is_empty());
    }

    #[test]
    fn q4_0_tile_payload_size() {
        let q = quantize_tensor(&gradient(32, 32), Scheme::Q4_0, Grouping::Tile).unwrap();
        let rec = TensorRecord::new("w", TensorData::Quant(q));
        assert_eq!(rec.data.payload_len(), 576);
        let bytes = encode_tensor_file(std::slice::from_ref(&rec));
        // header 8, name_len 4, name 1, tags 3, dims 16, payload_len 8
        assert_eq!(bytes.len(), 8 + 4 + 1 + 3 + 16 + 8 + 576);
        assert_eq!(&bytes[32..40], &576u64.to_le_bytes());
        assert_eq!(decode_tensor_file(&bytes).unwrap(), vec![rec]);
    }

    #[test]
    fn every_dtype_roundtrips() {
        let m = gradient(40, 70);
        let tile4 = quantize_tensor(&m, Scheme::Q4_0, Grouping::Tile).unwrap();
        let records = vec![
            TensorRecord::new(
                "f16",
                TensorData::F16 {
                    dims: vec![2, 3, 4],
                    data: (0..24).map(|i| Half::from_f32(i as f32)).collect(),
                },
            ),
            TensorRecord::new(
                "tiled",
                TensorData::F16Tiled(crate::tile_layout::to_tiled(&crate::quantize::round_to_f16(&m)).unwrap()),
            ),
            TensorRecord::new("q4c", TensorData::Quant(quantize_tensor(&m, Scheme::Q4_0, Grouping::Conventional).unwrap())),
            TensorRecord::new("q8t", TensorData::Quant(quantize_tensor(&m, Scheme::Q8_0, Grouping::Tile).unwrap())),
            TensorRecord::new("q4s", TensorData::Quant(coalesce_super_blocks(&tile4).unwrap())),
            TensorRecord::new("ünï", TensorData::Quant(tile4)),
        ];
        let bytes = encode_tensor_file(&records);
        let back = decode_tensor_file(&bytes).unwrap();
        assert_eq!(back, records);
        assert_eq!(encode_tensor_file(&back), bytes);
    }

    #[test]
    fn corruption_classes() {
        let q = quantize_tensor(&gradient(32, 64), Scheme::Q8_0, Grouping::Tile).unwrap();
        let good = encode_tensor_file(&[TensorRecord::new("w", TensorData::Quant(q))]);
        // name at 12, dtype at 13, grouping 14, rank 15, dims 16..32, payload_len 32..40

        let mut b = good.clone();
        b[0] = b'X';
        assert!(matches!(decode_tensor_file(&b), Err(TensorIoError::BadMagic(_))));
        let mut b = good.clone();
        b[4] = 2;
        assert!(matches!(decode_tensor_file(&b), Err(TensorIoError::UnsupportedVersion(2))));
        let mut b = good.clone();
        b[13] = 9;
        assert!(matches!(decode_tensor_file(&b), Err(TensorIoError::UnknownDtype { tag: 9, .. })));
        let mut b = good.clone();
        b[14] = 5;
        assert!(matches!(decode_tensor_file(&b), Err(TensorIoError::UnknownGrouping { tag: 5, .. })));
        let mut b = good.clone();
        b[32] ^= 1;
        assert!(matches!(decode_tensor_file(&b), Err(TensorIoError::SizeMismatch { .. })));
        let mut b = good.clone();
        b[12] = 0xFF;
        assert!(matches!(decode_tensor_file(&b), Err(TensorIoError::InvalidName { .. })));
        let mut b = good.clone();
        b[15] = 3;
        assert!(decode_tensor_file(&b).is_err());
        for cut in [3, 7, 10, 20, 39, good.len() - 1] {
            assert!(
                matches!(decode_tensor_file(&good[..cut]), Err(TensorIoError::Truncated { .. })),
                "cut {cut}"
            );
        }
    }

    #[test]
    fn atomic_write_and_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.tqk");
        let rec = TensorRecord::new(
            "x",
            TensorData::F16 {
                dims: vec![3],
                data: vec![Half::ONE; 3],
            },
        );
        write_tensor_file(&path, std::slice::from_ref(&rec)).unwrap();
        assert_eq!(read_tensor_file(&path).unwrap(), vec![rec]);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
        assert!(matches!(
            read_tensor_file(dir.path().join("missing")),
            Err(TensorIoError::Io(_))
        ));
    }
}
