//! FP16 flash attention with table-driven exponentials.
//!
//! For every query tile the KV sequence is streamed in tiles of `block_kv`
//! rows. Per tile:
//!
//! ```text
//! S     = f16(scale * Q K^T)                  FP32 accumulate, FP16 store
//! m'    = max(m, rowmax(S))                   FP16
//! P     = exp2(S - m')                        FP16 in, FP16 out
//! alpha = exp2(m - m')                        FP16
//! l'    = f16(alpha * l + rowsum(P))          FP32 rowsum
//! O'    = f16(alpha * O + P V)                FP32 accumulate, FP16 store
//! ```
//!
//! and finally `O / l` in FP32, rounded once. `scale = log2(e) / sqrt(d)`
//! folds the base change into the score scaling, so every exponential is a
//! base-2 exponential of a non-positive FP16 value and can be served by
//! [`ExpLut`].
//!
//! Masked scores are `-inf`. A row whose keys are all masked keeps `l = 0` and
//! produces zeros.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::numerics::{exp2_poly_f16, f32_to_f16, max_propagate_nan, ExpLut, Half};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AttentionError {
    #[error("{what}: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("head dimension {0} is not a positive multiple of 32")]
    UnsupportedHeadDim(usize),
    #[error("invalid tile sizes: block_q={block_q}, block_kv={block_kv} (block_kv must be a positive multiple of 32)")]
    TileSize { block_q: usize, block_kv: usize },
    #[error("invalid head grouping: {num_heads} query heads, {kv_heads} kv heads")]
    HeadGrouping { num_heads: usize, kv_heads: usize },
    #[error("checked mode: {0} positive inputs reached the exponential")]
    PositiveExpInput(u64),
}

/// Exponential used for `P` and the rescale factor.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpKernel {
    #[default]
    Lut,
    Polynomial,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mask {
    #[default]
    None,
    /// Query `i` sits at absolute position `query_start + i`; key `j` is
    /// visible iff `j <= query_start + i`.
    Causal { query_start: i64 },
}

impl Mask {
    /// Causal mask with the queries aligned to the end of the KV sequence.
    pub fn causal_aligned(nq: usize, nkv: usize) -> Self {
        Mask::Causal {
            query_start: nkv as i64 - nq as i64,
        }
    }

    #[inline]
    fn visible(&self, query: usize, key: usize) -> bool {
        match *self {
            Mask::None => true,
            Mask::Causal { query_start } => (key as i64) <= query_start + query as i64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub head_dim: usize,
    pub num_heads: usize,
    pub kv_heads: usize,
    pub block_q: usize,
    pub block_kv: usize,
    pub mask: Mask,
    pub exp: ExpKernel,
    /// Fail if any exponential input is positive.
    pub checked: bool,
}

impl AttentionConfig {
    pub fn new(head_dim: usize) -> Self {
        Self {
            head_dim,
            num_heads: 1,
            kv_heads: 1,
            block_q: 32,
            block_kv: 32,
            mask: Mask::None,
            exp: ExpKernel::Lut,
            checked: false,
        }
    }

    pub fn heads(mut self, num_heads: usize, kv_heads: usize) -> Self {
        self.num_heads = num_heads;
        self.kv_heads = kv_heads;
        self
    }

    pub fn tiles(mut self, block_q: usize, block_kv: usize) -> Self {
        self.block_q = block_q;
        self.block_kv = block_kv;
        self
    }

    pub fn mask(mut self, mask: Mask) -> Self {
        self.mask = mask;
        self
    }

    pub fn exp_kernel(mut self, exp: ExpKernel) -> Self {
        self.exp = exp;
        self
    }

    pub fn checked(mut self, checked: bool) -> Self {
        self.checked = checked;
        self
    }

    /// `log2(e) / sqrt(d)`: score scale with the base change folded in.
    pub fn scale(&self) -> f32 {
        std::f32::consts::LOG2_E / (self.head_dim as f32).sqrt()
    }

    /// KV head read by query head `h`.
    pub fn kv_head_for(&self, h: usize) -> usize {
        h * self.kv_heads / self.num_heads
    }

    fn validate(&self) -> Result<(), AttentionError> {
        if self.head_dim == 0 || !self.head_dim.is_multiple_of(32) {
            return Err(AttentionError::UnsupportedHeadDim(self.head_dim));
        }
        if self.block_q == 0 || self.block_kv == 0 || !self.block_kv.is_multiple_of(32) {
            return Err(AttentionError::TileSize {
                block_q: self.block_q,
                block_kv: self.block_kv,
            });
        }
        if self.kv_heads == 0 || self.kv_heads > self.num_heads {
            return Err(AttentionError::HeadGrouping {
                num_heads: self.num_heads,
                kv_heads: self.kv_heads,
            });
        }
        Ok(())
    }
}

/// `[heads, seq, dim]` row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadTensor<T> {
    heads: usize,
    seq: usize,
    dim: usize,
    data: Vec<T>,
}

impl<T: Copy> HeadTensor<T> {
    pub fn from_vec(heads: usize, seq: usize, dim: usize, data: Vec<T>) -> Result<Self, AttentionError> {
        if data.len() != heads * seq * dim {
            return Err(AttentionError::Shape {
                what: "buffer length",
                expected: heads * seq * dim,
                got: data.len(),
            });
        }
        Ok(Self { heads, seq, dim, data })
    }

    pub fn from_fn(heads: usize, seq: usize, dim: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(heads * seq * dim);
        for h in 0..heads {
            for s in 0..seq {
                for d in 0..dim {
                    data.push(f(h, s, d));
                }
            }
        }
        Self { heads, seq, dim, data }
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn seq(&self) -> usize {
        self.seq
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn row(&self, h: usize, s: usize) -> &[T] {
        let start = (h * self.seq + s) * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> HeadTensor<U> {
        HeadTensor {
            heads: self.heads,
            seq: self.seq,
            dim: self.dim,
            data: self.data.iter().map(f).collect(),
        }
    }
}

/// Operation counts, a desk-scale stand-in for a latency breakdown.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionStats {
    pub qk_macs: u64,
    pub pv_macs: u64,
    /// Score elements that went through the softmax update.
    pub softmax_elements: u64,
    /// Exponentials evaluated (scores plus one rescale factor per row per tile).
    pub exp_evaluations: u64,
    /// Exponentials served by the table.
    pub lut_lookups: u64,
    /// Exponential inputs that were strictly positive.
    pub positive_exp_inputs: u64,
}

impl std::ops::AddAssign for AttentionStats {
    fn add_assign(&mut self, o: Self) {
        self.qk_macs += o.qk_macs;
        self.pv_macs += o.pv_macs;
        self.softmax_elements += o.softmax_elements;
        self.exp_evaluations += o.exp_evaluations;
        self.lut_lookups += o.lut_lookups;
        self.positive_exp_inputs += o.positive_exp_inputs;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub out: HeadTensor<Half>,
    pub stats: AttentionStats,
}

/// Per-row record of the online softmax, for auditing normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct RowTrace {
    pub head: usize,
    pub query: usize,
    /// `P` for every key, computed against the running max of its KV tile.
    pub probs: Vec<Half>,
    /// Running max after each KV tile.
    pub tile_max: Vec<Half>,
    pub final_max: Half,
    pub final_sum: Half,
}

impl RowTrace {
    /// Attention weights implied by the trace:
    /// `P_k * 2^(m_tile(k) - m_final) / l`, in f64.
    pub fn weights(&self, block_kv: usize) -> Vec<f64> {
        let l = self.final_sum.to_f64();
        if l == 0.0 {
            return vec![0.0; self.probs.len()];
        }
        let m = self.final_max.to_f64();
        self.probs
            .iter()
            .enumerate()
            .map(|(k, p)| {
                let mt = self.tile_max[k / block_kv].to_f64();
                if p.to_f64() == 0.0 {
                    0.0
                } else {
                    p.to_f64() * (mt - m).exp2() / l
                }
            })
            .collect()
    }
}

/// FP16 subtraction with a single rounding (the exact difference of two FP16
/// values fits in f64).
#[inline]
fn sub_f16(a: Half, b: Half) -> Half {
    Half::from_f64(a.to_f64() - b.to_f64())
}

/// `lut_exp2(s - m)` elementwise; no normalization. Requires `s <= m`.
pub fn softmax_row_lut(s: &[Half], m: Half, lut: &ExpLut) -> Vec<Half> {
    s.iter().map(|&x| lut.exp2(sub_f16(x, m))).collect()
}

struct Exp<'a> {
    kernel: ExpKernel,
    lut: &'a ExpLut,
    stats: AttentionStats,
}

impl Exp<'_> {
    #[inline]
    fn eval(&mut self, x: Half) -> Half {
        self.stats.exp_evaluations += 1;
        if x > Half::ZERO {
            self.stats.positive_exp_inputs += 1;
        }
        match self.kernel {
            ExpKernel::Lut => {
                self.stats.lut_lookups += 1;
                self.lut.exp2(x)
            }
            ExpKernel::Polynomial => exp2_poly_f16(x),
        }
    }
}

#[inline]
fn dot_f32(a: &[Half], b: &[Half]) -> f32 {
    let mut acc = 0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x.to_f32() * y.to_f32();
    }
    acc
}

struct TileJob {
    head: usize,
    q0: usize,
    q1: usize,
}

struct TileResult {
    rows: Vec<Half>,
    stats: AttentionStats,
    traces: Vec<RowTrace>,
}

fn run_query_tile(
    job: &TileJob,
    q: &HeadTensor<Half>,
    k: &HeadTensor<Half>,
    v: &HeadTensor<Half>,
    cfg: &AttentionConfig,
    lut: &ExpLut,
    trace: bool,
) -> TileResult {
    let d = cfg.head_dim;
    let nkv = k.seq();
    let kvh = cfg.kv_head_for(job.head);
    let bq = job.q1 - job.q0;
    let scale = cfg.scale();

    let mut m = vec![Half::NEG_INFINITY; bq];
    let mut l = vec![Half::ZERO; bq];
    let mut o = vec![Half::ZERO; bq * d];
    let mut exp = Exp {
        kernel: cfg.exp,
        lut,
        stats: AttentionStats::default(),
    };
    let mut traces: Vec<RowTrace> = if trace {
        (0..bq)
            .map(|r| RowTrace {
                head: job.head,
                query: job.q0 + r,
                probs: Vec::with_capacity(nkv),
                tile_max: Vec::new(),
                final_max: Half::NEG_INFINITY,
                final_sum: Half::ZERO,
            })
            .collect()
    } else {
        Vec::new()
    };

    let mut s = vec![Half::ZERO; cfg.block_kv];
    let mut p = vec![Half::ZERO; cfg.block_kv];
    let mut acc = vec![0f32; d];
    for kv0 in (0..nkv).step_by(cfg.block_kv) {
        let kv1 = (kv0 + cfg.block_kv).min(nkv);
        let cols = kv1 - kv0;
        exp.stats.qk_macs += (bq * cols * d) as u64;
        exp.stats.pv_macs += (bq * cols * d) as u64;
        exp.stats.softmax_elements += (bq * cols) as u64;
        for r in 0..bq {
            let qi = job.q0 + r;
            let q_row = q.row(job.head, qi);
            let mut row_max = Half::NEG_INFINITY;
            for c in 0..cols {
                let key = kv0 + c;
                s[c] = if cfg.mask.visible(qi, key) {
                    f32_to_f16(scale * dot_f32(q_row, k.row(kvh, key)))
                } else {
                    Half::NEG_INFINITY
                };
                row_max = max_propagate_nan(row_max, s[c]);
            }
            let m_old = m[r];
            let m_new = max_propagate_nan(m_old, row_max);
            if m_new == Half::NEG_INFINITY {
                // Nothing visible yet; l and O stay zero.
                if trace {
                    traces[r].probs.extend(std::iter::repeat_n(Half::ZERO, cols));
                    traces[r].tile_max.push(m_new);
                }
                continue;
            }
            let mut rowsum = 0f32;
            for c in 0..cols {
                p[c] = exp.eval(sub_f16(s[c], m_new));
                rowsum += p[c].to_f32();
            }
            let alpha = exp.eval(sub_f16(m_old, m_new)).to_f32();
            l[r] = f32_to_f16(alpha * l[r].to_f32() + rowsum);

            let o_row = &mut o[r * d..(r + 1) * d];
            for (a, ov) in acc.iter_mut().zip(o_row.iter()) {
                *a = alpha * ov.to_f32();
            }
            for c in 0..cols {
                let pc = p[c].to_f32();
                if pc == 0.0 {
                    continue;
                }
                for (a, vv) in acc.iter_mut().zip(v.row(kvh, kv0 + c)) {
                    *a += pc * vv.to_f32();
                }
            }
            for (ov, a) in o_row.iter_mut().zip(&acc) {
                *ov = f32_to_f16(*a);
            }
            m[r] = m_new;
            if trace {
                traces[r].probs.extend_from_slice(&p[..cols]);
                traces[r].tile_max.push(m_new);
            }
        }
    }

    let mut rows = vec![Half::ZERO; bq * d];
    for r in 0..bq {
        let lr = l[r].to_f32();
        if lr == 0.0 {
            continue;
        }
        for t in 0..d {
            rows[r * d + t] = f32_to_f16(o[r * d + t].to_f32() / lr);
        }
        if trace {
            traces[r].final_max = m[r];
            traces[r].final_sum = l[r];
        }
    }
    TileResult {
        rows,
        stats: exp.stats,
        traces,
    }
}

fn check_inputs(
    q: &HeadTensor<Half>,
    k: &HeadTensor<Half>,
    v: &HeadTensor<Half>,
    cfg: &AttentionConfig,
) -> Result<(), AttentionError> {
    cfg.validate()?;
    let checks = [
        ("query heads", cfg.num_heads, q.heads()),
        ("key heads", cfg.kv_heads, k.heads()),
        ("value heads", cfg.kv_heads, v.heads()),
        ("query dim", cfg.head_dim, q.dim()),
        ("key dim", cfg.head_dim, k.dim()),
        ("value dim", cfg.head_dim, v.dim()),
        ("value length", k.seq(), v.seq()),
    ];
    for (what, expected, got) in checks {
        if expected != got {
            return Err(AttentionError::Shape { what, expected, got });
        }
    }
    if q.seq() == 0 {
        return Err(AttentionError::Shape {
            what: "query length",
            expected: 1,
            got: 0,
        });
    }
    if k.seq() == 0 {
        return Err(AttentionError::Shape {
            what: "key length",
            expected: 1,
            got: 0,
        });
    }
    Ok(())
}

fn run(
    q: &HeadTensor<Half>,
    k: &HeadTensor<Half>,
    v: &HeadTensor<Half>,
    cfg: &AttentionConfig,
    lut: &ExpLut,
    trace: bool,
) -> Result<(AttentionOutput, Vec<RowTrace>), AttentionError> {
    check_inputs(q, k, v, cfg)?;
    let nq = q.seq();
    let jobs: Vec<TileJob> = (0..cfg.num_heads)
        .flat_map(|head| {
            (0..nq).step_by(cfg.block_q).map(move |q0| TileJob {
                head,
                q0,
                q1: (q0 + cfg.block_q).min(nq),
            })
        })
        .collect();
    let results: Vec<TileResult> = jobs
        .par_iter()
        .map(|job| run_query_tile(job, q, k, v, cfg, lut, trace))
        .collect();

    let mut data = Vec::with_capacity(cfg.num_heads * nq * cfg.head_dim);
    let mut stats = AttentionStats::default();
    let mut traces = Vec::new();
    for r in results {
        data.extend_from_slice(&r.rows);
        stats += r.stats;
        traces.extend(r.traces);
    }
    if cfg.checked && stats.positive_exp_inputs > 0 {
        return Err(AttentionError::PositiveExpInput(stats.positive_exp_inputs));
    }
    let out = HeadTensor::from_vec(cfg.num_heads, nq, cfg.head_dim, data)?;
    Ok((AttentionOutput { out, stats }, traces))
}

/// FP16 flash attention. `q` is `[num_heads, Nq, d]`, `k` and `v` are
/// `[kv_heads, Nkv, d]`.
pub fn flash_attention_f16(
    q: &HeadTensor<Half>,
    k: &HeadTensor<Half>,
    v: &HeadTensor<Half>,
    cfg: &AttentionConfig,
    lut: &ExpLut,
) -> Result<AttentionOutput, AttentionError> {
    run(q, k, v, cfg, lut, false).map(|(o, _)| o)
}

/// [`flash_attention_f16`] plus a per-row trace of the online softmax.
pub fn flash_attention_traced(
    q: &HeadTensor<Half>,
    k: &HeadTensor<Half>,
    v: &HeadTensor<Half>,
    cfg: &AttentionConfig,
    lut: &ExpLut,
) -> Result<(AttentionOutput, Vec<RowTrace>), AttentionError> {
    run(q, k, v, cfg, lut, true)
}

/// Full softmax attention in f32 with natural `exp` and max subtraction.
/// Fully masked rows produce zeros.
pub fn reference_attention_f32(
    q: &HeadTensor<Half>,
    k: &HeadTensor<Half>,
    v: &HeadTensor<Half>,
    cfg: &AttentionConfig,
) -> Result<HeadTensor<f32>, AttentionError> {
    check_inputs(q, k, v, cfg)?;
    let d = cfg.head_dim;
    let inv_sqrt_d = 1.0 / (d as f32).sqrt();
    let nkv = k.seq();
    let mut data = Vec::with_capacity(cfg.num_heads * q.seq() * d);
    let mut scores = vec![0f32; nkv];
    for h in 0..cfg.num_heads {
        let kvh = cfg.kv_head_for(h);
        for i in 0..q.seq() {
            let qr: Vec<f32> = q.row(h, i).iter().map(|x| x.to_f32()).collect();
            let mut max = f32::NEG_INFINITY;
            for (j, s) in scores.iter_mut().enumerate() {
                *s = if cfg.mask.visible(i, j) {
                    let dot: f32 = qr.iter().zip(k.row(kvh, j)).map(|(a, b)| a * b.to_f32()).sum();
                    dot * inv_sqrt_d
                } else {
                    f32::NEG_INFINITY
                };
                max = max.max(*s);
            }
            let mut out = vec![0f32; d];
            if max != f32::NEG_INFINITY {
                let mut sum = 0f32;
                for (j, s) in scores.iter().enumerate() {
                    let e = (s - max).exp();
                    sum += e;
                    for (o, vv) in out.iter_mut().zip(v.row(kvh, j)) {
                        *o += e * vv.to_f32();
                    }
                }
                out.iter_mut().for_each(|o| *o /= sum);
            }
            data.extend(out);
        }
    }
    HeadTensor::from_vec(cfg.num_heads, q.seq(), d, data)
}
