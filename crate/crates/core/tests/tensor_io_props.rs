use proptest::prelude::*;
use tilelut::quantize::{coalesce_super_blocks, quantize_tensor, Grouping, Scheme};
use tilelut::tensor_io::{
    decode_tensor_file, encode_tensor_file, read_tensor_file, write_tensor_file, TensorData, TensorIoError, TensorRecord,
};
use tilelut::tile_layout::to_tiled;
use tilelut::{Half, Matrix};

fn matrix(rows: usize, cols: usize, seed: u64) -> Matrix<f32> {
    Matrix::from_fn(rows, cols, |r, c| {
        (((r * 7919 + c * 104729) as u64 ^ seed) % 2001) as f32 / 1000.0 - 1.0
    })
}

fn record() -> impl Strategy<Value = TensorRecord> {
    ("[a-z][a-z0-9_.]{0,12}", 0u8..6, 1usize..70, 1usize..70, any::<u64>()).prop_map(|(name, kind, r, c, seed)| {
        let m = matrix(r, c, seed);
        let data = match kind {
            0 => TensorData::F16 {
                dims: vec![r, c],
                data: m.as_slice().iter().map(|&x| Half::from_f32(x)).collect(),
            },
            1 => TensorData::F16Tiled(to_tiled(&m.map(|&x| Half::from_f32(x))).unwrap()),
            2 => TensorData::Quant(quantize_tensor(&m, Scheme::Q4_0, Grouping::Conventional).unwrap()),
            3 => TensorData::Quant(quantize_tensor(&m, Scheme::Q4_0, Grouping::Tile).unwrap()),
            4 => TensorData::Quant(quantize_tensor(&m, Scheme::Q8_0, Grouping::Conventional).unwrap()),
            _ => TensorData::Quant(
                coalesce_super_blocks(&quantize_tensor(&m, Scheme::Q4_0, Grouping::Tile).unwrap()).unwrap(),
            ),
        };
        TensorRecord::new(name, data)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn roundtrip_is_identity(records in prop::collection::vec(record(), 0..5)) {
        let bytes = encode_tensor_file(&records);
        let back = decode_tensor_file(&bytes).unwrap();
        prop_assert_eq!(&back, &records);
        prop_assert_eq!(encode_tensor_file(&back), bytes);
    }

    #[test]
    fn every_truncation_is_rejected(records in prop::collection::vec(record(), 1..3), frac in 0.0f64..1.0) {
        let bytes = encode_tensor_file(&records);
        let cut = ((bytes.len() as f64 * frac) as usize).min(bytes.len() - 1);
        let res = decode_tensor_file(&bytes[..cut]);
        // A cut exactly at a record boundary is a valid shorter file.
        if let Ok(parsed) = res {
            prop_assert!(parsed.len() < records.len());
            prop_assert_eq!(&parsed[..], &records[..parsed.len()]);
        } else {
            prop_assert!(matches!(res, Err(TensorIoError::Truncated { .. })), "{:?}", res);
        }
    }
}

#[test]
fn payload_sizes_follow_block_arithmetic() {
    let cases = [
        (32, 32, Scheme::Q4_0, Grouping::Tile, false, 576),
        (33, 5, Scheme::Q4_0, Grouping::Conventional, false, 2 * 5 * 18),
        (33, 5, Scheme::Q4_0, Grouping::Tile, false, 2 * 32 * 18),
        (40, 40, Scheme::Q8_0, Grouping::Tile, false, 4 * 32 * 34),
        (64, 64, Scheme::Q4_0, Grouping::Tile, true, 16 * 144),
    ];
    for (r, c, s, g, coalesce, expected) in cases {
        let mut q = quantize_tensor(&matrix(r, c, 1), s, g).unwrap();
        if coalesce {
            q = coalesce_super_blocks(&q).unwrap();
        }
        let data = TensorData::Quant(q);
        assert_eq!(data.payload_len(), expected, "{r}x{c} {s:?} {g:?}");
    }
}

#[test]
fn overwrite_is_atomic_and_complete() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.tqk");
    let a = vec![TensorRecord::new("a", TensorData::Quant(quantize_tensor(&matrix(64, 64, 2), Scheme::Q4_0, Grouping::Tile).unwrap()))];
    let b = vec![TensorRecord::new("b", TensorData::F16 { dims: vec![4], data: vec![Half::ONE; 4] })];
    write_tensor_file(&path, &a).unwrap();
    write_tensor_file(&path, &b).unwrap();
    assert_eq!(read_tensor_file(&path).unwrap(), b);
    let names: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(names, vec!["w.tqk"]);
}

#[test]
fn shape_rules() {
    // rank-1 quantized record
    let mut bytes = encode_tensor_file(&[]);
    bytes.extend_from_slice(&1u32.to_le_bytes());
    bytes.push(b'x');
    bytes.extend_from_slice(&[1, 1, 1]);
    bytes.extend_from_slice(&32u64.to_le_bytes());
    bytes.extend_from_slice(&18u64.to_le_bytes());
    bytes.extend_from_slice(&[0; 18]);
    assert!(matches!(decode_tensor_file(&bytes), Err(TensorIoError::InvalidShape { .. })));
}
