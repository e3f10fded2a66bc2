//! FP16 scalar helpers, polynomial `exp2` and the 32768-entry exponential table.
//!
//! All kernels in this crate trade in [`Half`] (IEEE-754 binary16). Conversions
//! from wider floats round to nearest, ties to even, and saturate to infinity.
//!
//! The exponential table stores `exp2(x)` for every non-positive FP16 `x`. The
//! sign bit of the input is ignored and the remaining 15 magnitude bits index
//! the table directly, so the table has `2^15` entries (64 KiB).

use std::sync::OnceLock;

pub use half::f16 as Half;

/// Number of entries in the exponential table (15 magnitude bits).
pub const EXP_LUT_ENTRIES: usize = 1 << 15;

const MAGNITUDE_MASK: u16 = 0x7FFF;
const EXPONENT_MASK: u16 = 0x7C00;

/// Round an `f32` to the nearest FP16 value (ties to even, overflow to ±inf).
#[inline]
pub fn f32_to_f16(x: f32) -> Half {
    Half::from_f32(x)
}

#[inline]
pub fn f16_to_f32(x: Half) -> f32 {
    x.to_f32()
}

/// IEEE `maximum`: NaN in either operand yields NaN.
#[inline]
pub fn max_propagate_nan(a: Half, b: Half) -> Half {
    if a.is_nan() || b.is_nan() {
        Half::NAN
    } else if a >= b {
        a
    } else {
        b
    }
}

/// The 15 magnitude bits of an FP16 value, i.e. the table index of `-|x|`.
#[inline]
pub fn magnitude_index(x: Half) -> usize {
    (x.to_bits() & MAGNITUDE_MASK) as usize
}

/// Distance in units of last place between two finite FP16 values.
pub fn ulp_distance(a: Half, b: Half) -> u32 {
    fn ordered(x: Half) -> i32 {
        let bits = x.to_bits();
        let mag = (bits & MAGNITUDE_MASK) as i32;
        if bits & 0x8000 != 0 {
            -mag
        } else {
            mag
        }
    }
    (ordered(a) - ordered(b)).unsigned_abs()
}

// Coefficients of 2^f on [0, 1), relative-error fit with the constant term
// pinned to 1 so exact powers of two stay exact. Max relative error ~1.7e-7
// in f32 evaluation.
const EXP2_COEFFS: [f32; 6] = [
    1.0,
    0.693_151_3,
    0.240_164_44,
    0.055_799_913,
    0.009_017_031,
    0.001_867_13,
];

/// `2^x` via range reduction and a degree-5 polynomial.
///
/// `x = k + f` with `k = floor(x)` and `f` in `[0, 1)`. The polynomial gives
/// `2^f` in `[1, 2)` and `k` is added directly to the exponent field. Results
/// below the normal f32 range flush to zero and results above it become
/// `+inf`.
pub fn exp2_poly(x: f32) -> f32 {
    if x.is_nan() {
        return f32::NAN;
    }
    if x >= 128.0 {
        return f32::INFINITY;
    }
    if x < -126.0 {
        return 0.0;
    }
    let k = x.floor();
    let f = x - k;
    let mut p = EXP2_COEFFS[5];
    for &c in EXP2_COEFFS[..5].iter().rev() {
        p = p * f + c;
    }
    let k = k as i32;
    // p lies in [1, 2], so its biased exponent is 127 (or 128 at the top end).
    let biased = ((p.to_bits() >> 23) & 0xFF) as i32 + k;
    if biased >= 255 {
        return f32::INFINITY;
    }
    if biased <= 0 {
        return 0.0;
    }
    f32::from_bits((p.to_bits() as i32 + (k << 23)) as u32)
}

/// FP16 `exp2` through the polynomial path: widen, evaluate, round.
#[inline]
pub fn exp2_poly_f16(x: Half) -> Half {
    f32_to_f16(exp2_poly(x.to_f32()))
}

/// Precomputed `exp2` over the non-positive half of FP16.
///
/// `entries[i]` is the correctly rounded FP16 value of `exp2(-|v|)` where `v`
/// is the FP16 number with magnitude bits `i`. Indices whose magnitude encodes
/// infinity or NaN hold `0.0`.
#[derive(Clone)]
pub struct ExpLut {
    entries: Box<[Half]>,
}

impl ExpLut {
    pub fn build() -> Self {
        let entries: Vec<Half> = (0..EXP_LUT_ENTRIES as u16)
            .map(|mag| {
                if mag & EXPONENT_MASK == EXPONENT_MASK {
                    return Half::ZERO;
                }
                let x = -Half::from_bits(mag).to_f64();
                // Direct f64 -> f16 rounding; no intermediate f32 step.
                Half::from_f64(x.exp2())
            })
            .collect();
        Self {
            entries: entries.into_boxed_slice(),
        }
    }

    /// Process-wide table, built on first use.
    pub fn shared() -> &'static ExpLut {
        static LUT: OnceLock<ExpLut> = OnceLock::new();
        LUT.get_or_init(ExpLut::build)
    }

    #[inline]
    pub fn entry(&self, index: usize) -> Half {
        self.entries[index]
    }

    pub fn entries(&self) -> &[Half] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Storage footprint in bytes (65536 for the full table).
    pub fn size_bytes(&self) -> usize {
        std::mem::size_of_val(&*self.entries)
    }

    #[inline]
    pub fn exp2(&self, x: Half) -> Half {
        self.entries[magnitude_index(x)]
    }
}

impl std::fmt::Debug for ExpLut {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ExpLut")
            .field("entries", &self.entries.len())
            .finish()
    }
}

/// Table-driven `exp2` for non-positive inputs.
///
/// The sign bit is dropped, so a positive `x` is treated as `-x`. Callers keep
/// inputs non-positive by subtracting a running maximum first.
#[inline]
pub fn lut_exp2(x: Half, lut: &ExpLut) -> Half {
    lut.exp2(x)
}
