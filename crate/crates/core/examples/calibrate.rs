//! Oracle sweeps behind the tolerances pinned in the acceptance suite.
//!
//! ```text
//! cargo run --release -p tilelut --example calibrate
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tilelut::attention::{flash_attention_traced, reference_attention_f32, AttentionConfig, HeadTensor};
use tilelut::gemm::{max_normalized_error, reference_gemm, tile_gemm_f16, TileGemmParams};
use tilelut::tile_layout::{from_tiled, to_tiled};
use tilelut::{ExpLut, Half, Matrix};

fn randn_half(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<Half> {
    Matrix::from_fn(rows, cols, |_, _| {
        let x: f64 = StandardNormal.sample(rng);
        Half::from_f64(x)
    })
}

fn randn_heads(seq: usize, dim: usize, rng: &mut ChaCha8Rng) -> HeadTensor<Half> {
    HeadTensor::from_fn(1, seq, dim, |_, _, _| {
        let x: f64 = StandardNormal.sample(rng);
        Half::from_f64(x)
    })
}

fn main() {
    let seeds = 8;
    println!("gemm: max |out - ref| / sum|a*w| over {seeds} seeds");
    for m in [1, 4, 16, 32] {
        for k in [64, 512] {
            for n in [64, 512] {
                let mut worst = 0f64;
                for s in 0..seeds {
                    let mut rng = ChaCha8Rng::seed_from_u64(s);
                    let a = randn_half(m, k, &mut rng);
                    let w = randn_half(k, n, &mut rng);
                    let out = tile_gemm_f16(
                        &to_tiled(&a).unwrap(),
                        &to_tiled(&w).unwrap(),
                        &TileGemmParams::default(),
                    )
                    .unwrap();
                    let (a64, w64) = (a.map(|x| x.to_f64()), w.map(|x| x.to_f64()));
                    let reference = reference_gemm(&a64, &w64).unwrap();
                    worst = worst.max(max_normalized_error(&from_tiled(&out), &reference, &a64, &w64));
                }
                println!("  M={m:<3} K={k:<4} N={n:<4} {worst:.3e}  (2^-11 = {:.3e})", 2f64.powi(-11));
            }
        }
    }

    let lut = ExpLut::shared();
    println!("attention d=64: max |O - O_ref|, max |sum(w) - 1| over {seeds} seeds");
    for nq in [1, 4, 16] {
        for nkv in [128, 512, 1024] {
            for bkv in [32, 64, 128] {
                let (mut err, mut sum_err) = (0f32, 0f64);
                for s in 0..seeds {
                    let mut rng = ChaCha8Rng::seed_from_u64(1000 + s);
                    let q = randn_heads(nq, 64, &mut rng);
                    let k = randn_heads(nkv, 64, &mut rng);
                    let v = randn_heads(nkv, 64, &mut rng);
                    let cfg = AttentionConfig::new(64).tiles(16, bkv);
                    let (out, traces) = flash_attention_traced(&q, &k, &v, &cfg, lut).unwrap();
                    let reference = reference_attention_f32(&q, &k, &v, &cfg).unwrap();
                    for (x, y) in out.out.as_slice().iter().zip(reference.as_slice()) {
                        err = err.max((x.to_f32() - y).abs());
                    }
                    for t in traces {
                        let total: f64 = t.weights(bkv).iter().sum();
                        sum_err = sum_err.max((total - 1.0).abs());
                    }
                }
                println!("  Nq={nq:<3} Nkv={nkv:<5} Bkv={bkv:<4} {err:.3e}  {sum_err:.3e}");
            }
        }
    }
}
