use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tilelut::gemm::{gemm_quant, tile_gemm_f16, tile_gemm_f16_stats, DequantPath, TileGemmParams};
use tilelut::quantize::{coalesce_super_blocks, dequantize_tensor, quantize_tensor, DequantizedTensor, Grouping, Scheme};
use tilelut::tile_layout::{from_tiled, to_tiled};
use tilelut::{Half, Matrix};

fn rand_half(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<Half> {
    Matrix::from_fn(rows, cols, |_, _| Half::from_f32(rng.random_range(-2.0..2.0)))
}

fn bits(m: &Matrix<Half>) -> Vec<u16> {
    m.as_slice().iter().map(|h| h.to_bits()).collect()
}

/// Independent accumulator: one f32 sum per output, ascending k.
fn f32_accumulators(a: &Matrix<Half>, w: &Matrix<Half>) -> Matrix<f32> {
    Matrix::from_fn(a.rows(), w.cols(), |i, j| {
        let mut acc = 0f32;
        for k in 0..a.cols() {
            acc += a.get(i, k).to_f32() * w.get(k, j).to_f32();
        }
        acc
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn matches_sequential_f32_accumulation(m in 1usize..40, k in 1usize..80, n in 1usize..70, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_half(m, k, &mut rng);
        let w = rand_half(k, n, &mut rng);
        let scale: Vec<Half> = (0..n).map(|_| Half::from_f32(rng.random_range(0.25..4.0))).collect();
        let bias: Vec<Half> = (0..n).map(|_| Half::from_f32(rng.random_range(-1.0..1.0))).collect();
        let p = TileGemmParams::default().with_scale(scale.clone()).with_bias(bias.clone());
        let out = from_tiled(&tile_gemm_f16(&to_tiled(&a).unwrap(), &to_tiled(&w).unwrap(), &p).unwrap());
        let acc = f32_accumulators(&a, &w);
        for i in 0..m {
            for j in 0..n {
                let want = Half::from_f32(scale[j].to_f32() * *acc.get(i, j) + bias[j].to_f32());
                prop_assert_eq!(out.get(i, j).to_bits(), want.to_bits());
            }
        }
    }

    #[test]
    fn padding_is_neutral(m in 1usize..20, k in 1usize..50, n in 1usize..50, extra_k in 1usize..40, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = rand_half(m, k, &mut rng);
        let w = rand_half(k, n, &mut rng);
        let base = from_tiled(&tile_gemm_f16(&to_tiled(&a).unwrap(), &to_tiled(&w).unwrap(), &TileGemmParams::default()).unwrap());
        // Explicit zero rows/columns appended to K.
        let a_wide = Matrix::from_fn(m, k + extra_k, |i, kk| if kk < k { *a.get(i, kk) } else { Half::ZERO });
        let w_tall = Matrix::from_fn(k + extra_k, n, |kk, j| if kk < k { *w.get(kk, j) } else { Half::ZERO });
        let padded = from_tiled(&tile_gemm_f16(&to_tiled(&a_wide).unwrap(), &to_tiled(&w_tall).unwrap(), &TileGemmParams::default()).unwrap());
        prop_assert_eq!(bits(&base), bits(&padded));
    }

    #[test]
    fn fused_equals_dequantize_then_gemm(m in 1usize..20, k in 1usize..90, n in 1usize..90, q8 in any::<bool>(), coalesce in any::<bool>(), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = to_tiled(&rand_half(m, k, &mut rng)).unwrap();
        let w = Matrix::from_fn(k, n, |_, _| rng.random_range(-1.0f32..1.0));
        let scheme = if q8 { Scheme::Q8_0 } else { Scheme::Q4_0 };
        let mut wq = quantize_tensor(&w, scheme, Grouping::Tile).unwrap();
        if coalesce && !q8 {
            wq = coalesce_super_blocks(&wq).unwrap();
        }
        let (fused, stats) = gemm_quant(&a, &wq, &TileGemmParams::default()).unwrap();
        let DequantizedTensor::Tiled(wd) = dequantize_tensor(&wq) else { unreachable!() };
        let composed = tile_gemm_f16(&a, &wd, &TileGemmParams::default()).unwrap();
        prop_assert!(fused.as_slice().iter().zip(composed.as_slice()).all(|(x, y)| x.to_bits() == y.to_bits()));
        prop_assert_eq!(stats.path, DequantPath::Tiled);
        prop_assert_eq!(stats.weight_elements_visited, wq.padded_len() as u64);
    }
}

#[test]
fn thread_count_does_not_change_results() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let a = to_tiled(&rand_half(33, 200, &mut rng)).unwrap();
    let w = to_tiled(&rand_half(200, 150, &mut rng)).unwrap();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| tile_gemm_f16(&a, &w, &TileGemmParams::default()).unwrap())
    };
    let one = run(1);
    for threads in [2, 3, 8] {
        assert_eq!(run(threads), one);
    }
}

#[test]
fn gemv_shape_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = to_tiled(&rand_half(1, 64, &mut rng)).unwrap();
    let w = to_tiled(&rand_half(64, 96, &mut rng)).unwrap();
    let (_, stats) = tile_gemm_f16_stats(&a, &w, &TileGemmParams::default()).unwrap();
    // A single activation row still issues full 32x32x32 tile products.
    assert_eq!(stats.macs, (2 * 3 * 32 * 32 * 32) as u64);
    assert_eq!(stats.weight_elements_visited, 64 * 96);
}
