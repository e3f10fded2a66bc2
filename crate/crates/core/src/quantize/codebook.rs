//! 16-entry decode tables for 4-bit codes.
//!
//! Dequantization is a table lookup followed by a scale multiply, so a
//! different 4-bit encoding only changes the table contents.

use serde::{Deserialize, Serialize};

use crate::numerics::{f32_to_f16, Half};

use super::blocks::GROUP_SIZE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Codebook {
    /// `code - 8`, the Q4_0 table.
    Linear,
    /// NormalFloat-4 levels in `[-1, 1]`.
    Nf4,
    /// Non-linear 4-bit levels from llama.cpp's IQ4_NL.
    Iq4Nl,
}

const NF4: [f32; 16] = [
    -1.0,
    -0.696_192_8,
    -0.525_073_05,
    -0.394_917_5,
    -0.284_441_38,
    -0.184_773_43,
    -0.091_050_036,
    0.0,
    0.079_580_3,
    0.160_930_2,
    0.246_112_3,
    0.337_915_24,
    0.440_709_83,
    0.562_617,
    0.722_956_84,
    1.0,
];

const IQ4_NL: [i8; 16] = [
    -127, -104, -83, -65, -49, -35, -22, -10, 1, 13, 25, 38, 53, 69, 89, 113,
];

impl Codebook {
    pub fn lut(self) -> DecodeLut16 {
        let values = match self {
            Codebook::Linear => std::array::from_fn(|i| Half::from_f32(i as f32 - 8.0)),
            Codebook::Nf4 => NF4.map(f32_to_f16),
            Codebook::Iq4Nl => IQ4_NL.map(|v| Half::from_f32(v as f32)),
        };
        DecodeLut16 { values }
    }
}

/// Code -> unscaled value table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeLut16 {
    pub values: [Half; 16],
}

impl DecodeLut16 {
    #[inline]
    pub fn lookup(&self, code: u8) -> Half {
        self.values[(code & 0x0F) as usize]
    }

    pub fn is_monotone(&self) -> bool {
        self.values.windows(2).all(|w| w[0] < w[1])
    }
}

/// `lut[code] * scale`, rounded once to FP16.
#[inline]
pub fn decode_lut_scaled(lut: &DecodeLut16, code: u8, scale: Half) -> Half {
    f32_to_f16(lut.lookup(code).to_f32() * scale.to_f32())
}

/// Broadcast up to four group scales across 128 lanes with one 16-entry table
/// lookup. The scales sit in table slots 0..4 and a constant index vector
/// selects slot `lane / 32` for each lane.
pub fn broadcast_scales(scales: &[Half]) -> [Half; 4 * GROUP_SIZE] {
    debug_assert!(scales.len() <= 4);
    let mut table = [Half::ZERO; 16];
    table[..scales.len()].copy_from_slice(scales);
    SCALE_BROADCAST_INDEX.map(|i| table[i as usize])
}

const SCALE_BROADCAST_INDEX: [u8; 4 * GROUP_SIZE] = {
    let mut idx = [0u8; 4 * GROUP_SIZE];
    let mut i = 0;
    while i < idx.len() {
        idx[i] = (i / GROUP_SIZE) as u8;
        i += 1;
    }
    idx
};

/// Dequantize 4-bit codes through `lut`; element `i` uses `scales[i / 32]`.
///
/// Accepts one group (32 codes, one scale) or a super-block (256 codes, eight
/// scales). Scales are broadcast four groups at a time.
pub fn dequantize_block_lut(codes: &[u8], scales: &[Half], lut: &DecodeLut16, out: &mut [Half]) {
    assert_eq!(codes.len(), scales.len() * GROUP_SIZE, "one scale per 32 codes");
    assert_eq!(out.len(), codes.len());
    for ((codes, scales), out) in codes
        .chunks(4 * GROUP_SIZE)
        .zip(scales.chunks(4))
        .zip(out.chunks_mut(4 * GROUP_SIZE))
    {
        let lanes = broadcast_scales(scales);
        for ((o, &c), &s) in out.iter_mut().zip(codes).zip(lanes.iter()) {
            *o = decode_lut_scaled(lut, c, s);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tables_are_monotone() {
        for cb in [Codebook::Linear, Codebook::Nf4, Codebook::Iq4Nl] {
            assert!(cb.lut().is_monotone(), "{cb:?}");
        }
        let lin = Codebook::Linear.lut();
        assert_eq!(lin.lookup(0).to_f32(), -8.0);
        assert_eq!(lin.lookup(15).to_f32(), 7.0);
    }

    #[test]
    fn linear_examples() {
        let lut = Codebook::Linear.lut();
        let mut out = [Half::ONE; 32];
        dequantize_block_lut(&[8; 32], &[Half::from_f32(3.25)], &lut, &mut out);
        assert!(out.iter().all(|v| *v == Half::ZERO));

        let mut codes = [8u8; 32];
        codes[3] = 15;
        dequantize_block_lut(&codes, &[Half::from_f32(0.5)], &lut, &mut out);
        assert_eq!(out[3].to_f32(), 3.5);
    }

    #[test]
    fn swapping_table_changes_values_not_codes() {
        let codes: Vec<u8> = (0..32).map(|i| (i % 16) as u8).collect();
        let scales = [Half::ONE];
        let mut lin = [Half::ZERO; 32];
        let mut nf4 = [Half::ZERO; 32];
        dequantize_block_lut(&codes, &scales, &Codebook::Linear.lut(), &mut lin);
        dequantize_block_lut(&codes, &scales, &Codebook::Nf4.lut(), &mut nf4);
        assert_ne!(lin, nf4);
        assert_eq!(nf4[0].to_f32(), -1.0);
        assert_eq!(nf4[15].to_f32(), 1.0);
        assert_eq!(nf4[7], Half::ZERO);
    }

    #[test]
    fn super_block_scales_follow_groups() {
        let codes = [9u8; 256];
        let scales: Vec<Half> = (0..8).map(|g| Half::from_f32(g as f32 + 1.0)).collect();
        let mut out = [Half::ZERO; 256];
        dequantize_block_lut(&codes, &scales, &Codebook::Linear.lut(), &mut out);
        for (i, v) in out.iter().enumerate() {
            assert_eq!(v.to_f32(), (i / 32) as f32 + 1.0);
        }
    }
}
