use std::collections::HashSet;

use proptest::prelude::*;
use tilelut::tile_layout::{from_tiled, tile_index_map, to_tiled, TILE_BYTES_F16};
use tilelut::{Half, Matrix};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn roundtrip_is_bit_exact(rows in 1usize..=120, cols in 1usize..=120, seed in any::<u64>()) {
        let m = Matrix::from_fn(rows, cols, |r, c| {
            Half::from_bits((seed.wrapping_mul(r as u64 * 131 + c as u64 + 1) >> 17) as u16)
        });
        let t = to_tiled(&m).unwrap();
        let back = from_tiled(&t);
        prop_assert!(back.as_slice().iter().zip(m.as_slice()).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert_eq!(t.size_bytes(), rows.div_ceil(32) * cols.div_ceil(32) * TILE_BYTES_F16);
        prop_assert_eq!(t.tile_count(), rows.div_ceil(32) * cols.div_ceil(32));
    }

    #[test]
    fn index_map_is_a_bijection(rows in 1usize..=100, cols in 1usize..=100) {
        let map = tile_index_map(rows, cols).unwrap();
        let mut seen = HashSet::new();
        for r in 0..rows {
            for c in 0..cols {
                let off = map.offset(r, c);
                prop_assert!(off < map.padded_len());
                prop_assert!(seen.insert(off));
                prop_assert_eq!(map.coord(off), Some((r, c)));
            }
        }
        let padding = (0..map.padded_len()).filter(|&o| map.coord(o).is_none()).count();
        prop_assert_eq!(padding + rows * cols, map.padded_len());
    }

    #[test]
    fn aligned_runs_are_two_by_sixteen(rows in 1usize..=100, cols in 1usize..=100) {
        let map = tile_index_map(rows, cols).unwrap();
        for start in (0..map.padded_len()).step_by(32) {
            let coords: Vec<(usize, usize)> = (start..start + 32).map(|o| map.padded_coord(o)).collect();
            let r0 = coords.iter().map(|c| c.0).min().unwrap();
            let c0 = coords.iter().map(|c| c.1).min().unwrap();
            prop_assert_eq!(r0 % 2, 0);
            prop_assert_eq!(c0 % 16, 0);
            let expected: HashSet<(usize, usize)> =
                (r0..r0 + 2).flat_map(|r| (c0..c0 + 16).map(move |c| (r, c))).collect();
            prop_assert_eq!(coords.into_iter().collect::<HashSet<_>>(), expected);
        }
    }
}
