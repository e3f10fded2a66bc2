//! Q4_0 / Q8_0 blocks and the coalesced Q4 super-block.
//!
//! Byte layouts (little-endian scales):
//!
//! | block        | layout                                   | bytes | weights |
//! |--------------|------------------------------------------|-------|---------|
//! | `Q4_0`       | scale f16, 16 bytes of nibbles           | 18    | 32      |
//! | `Q8_0`       | scale f16, 32 x i8                       | 34    | 32      |
//! | super-block  | 128 bytes of nibbles, 8 x scale f16      | 144   | 256     |
//!
//! Inside a `Q4_0` block byte `j` holds element `j` in the low nibble and
//! element `j + 16` in the high nibble. Inside a super-block byte `i` holds
//! element `2i` in the low nibble and `2i + 1` in the high nibble, and
//! elements `32g..32g + 32` use `scales[g]`.

use crate::numerics::{f32_to_f16, Half};

pub const GROUP_SIZE: usize = 32;
pub const SUPER_GROUPS: usize = 8;
pub const SUPER_SIZE: usize = GROUP_SIZE * SUPER_GROUPS;

pub const Q4_0_BYTES: usize = 18;
pub const Q8_0_BYTES: usize = 34;
pub const SUPER_Q4_BYTES: usize = 144;

const Q4_OFFSET: i32 = 8;

#[derive(Debug, Clone, Copy)]
pub struct BlockQ4_0 {
    pub scale: Half,
    pub qs: [u8; 16],
}

#[derive(Debug, Clone, Copy)]
pub struct BlockQ8_0 {
    pub scale: Half,
    pub qs: [i8; 32],
}

#[derive(Debug, Clone, Copy)]
pub struct SuperBlockQ4 {
    pub qs: [u8; 128],
    pub scales: [Half; SUPER_GROUPS],
}

/// Scales are stored as FP16; a scale that would overflow saturates.
fn store_scale(d: f32) -> Half {
    let s = f32_to_f16(d);
    if s.is_infinite() {
        if d < 0.0 {
            Half::MIN
        } else {
            Half::MAX
        }
    } else if s == Half::ZERO {
        // normalize -0.0
        Half::ZERO
    } else {
        s
    }
}

/// Round-to-nearest Q4_0 quantization of one group.
///
/// The signed element of largest magnitude maps to code 0 (value `-8`), so
/// `scale = max / -8`. An all-zero group gets scale 0 and neutral codes.
pub fn quantize_group_q4_0(group: &[f32; GROUP_SIZE]) -> BlockQ4_0 {
    let mut amax = 0.0f32;
    let mut max = 0.0f32;
    for &v in group {
        if v.abs() > amax {
            amax = v.abs();
            max = v;
        }
    }
    let scale = store_scale(max / -8.0);
    let sf = scale.to_f32();
    let mut codes = [Q4_OFFSET as u8; GROUP_SIZE];
    if sf != 0.0 {
        for (code, &v) in codes.iter_mut().zip(group) {
            *code = ((v / sf).round() as i32 + Q4_OFFSET).clamp(0, 15) as u8;
        }
    }
    BlockQ4_0::from_codes(scale, &codes)
}

/// Round-to-nearest Q8_0 quantization of one group: `scale = amax / 127`.
pub fn quantize_group_q8_0(group: &[f32; GROUP_SIZE]) -> BlockQ8_0 {
    let amax = group.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let scale = store_scale(amax / 127.0);
    let sf = scale.to_f32();
    let mut qs = [0i8; GROUP_SIZE];
    if sf != 0.0 {
        for (q, &v) in qs.iter_mut().zip(group) {
            *q = ((v / sf).round() as i32).clamp(-127, 127) as i8;
        }
    }
    BlockQ8_0 { scale, qs }
}

impl BlockQ4_0 {
    pub fn from_codes(scale: Half, codes: &[u8; GROUP_SIZE]) -> Self {
        let mut qs = [0u8; 16];
        for (j, byte) in qs.iter_mut().enumerate() {
            *byte = (codes[j] & 0x0F) | ((codes[j + 16] & 0x0F) << 4);
        }
        Self { scale, qs }
    }

    #[inline]
    pub fn code(&self, i: usize) -> u8 {
        if i < 16 {
            self.qs[i] & 0x0F
        } else {
            self.qs[i - 16] >> 4
        }
    }

    pub fn codes(&self) -> [u8; GROUP_SIZE] {
        std::array::from_fn(|i| self.code(i))
    }

    /// Exact decode `(code - 8) * scale`, computed in f32.
    pub fn decode_f32(&self) -> [f32; GROUP_SIZE] {
        let s = self.scale.to_f32();
        std::array::from_fn(|i| (self.code(i) as i32 - Q4_OFFSET) as f32 * s)
    }

    pub fn to_bytes(&self) -> [u8; Q4_0_BYTES] {
        let mut out = [0u8; Q4_0_BYTES];
        out[..2].copy_from_slice(&self.scale.to_le_bytes());
        out[2..].copy_from_slice(&self.qs);
        out
    }

    pub fn from_bytes(bytes: &[u8; Q4_0_BYTES]) -> Self {
        let mut qs = [0u8; 16];
        qs.copy_from_slice(&bytes[2..]);
        Self {
            scale: Half::from_le_bytes([bytes[0], bytes[1]]),
            qs,
        }
    }
}

impl BlockQ8_0 {
    pub fn decode_f32(&self) -> [f32; GROUP_SIZE] {
        let s = self.scale.to_f32();
        std::array::from_fn(|i| self.qs[i] as f32 * s)
    }

    /// FP16 decode; a single rounding of the exact product.
    pub fn dequantize(&self) -> [Half; GROUP_SIZE] {
        self.decode_f32().map(f32_to_f16)
    }

    pub fn to_bytes(&self) -> [u8; Q8_0_BYTES] {
        let mut out = [0u8; Q8_0_BYTES];
        out[..2].copy_from_slice(&self.scale.to_le_bytes());
        for (o, q) in out[2..].iter_mut().zip(self.qs) {
            *o = q as u8;
        }
        out
    }

    pub fn from_bytes(bytes: &[u8; Q8_0_BYTES]) -> Self {
        Self {
            scale: Half::from_le_bytes([bytes[0], bytes[1]]),
            qs: std::array::from_fn(|i| bytes[2 + i] as i8),
        }
    }
}

impl SuperBlockQ4 {
    /// Repack eight consecutive Q4_0 blocks.
    pub fn coalesce(blocks: &[BlockQ4_0; SUPER_GROUPS]) -> Self {
        let mut qs = [0u8; 128];
        for (g, block) in blocks.iter().enumerate() {
            for (i, code) in block.codes().into_iter().enumerate() {
                let e = g * GROUP_SIZE + i;
                qs[e / 2] |= code << (4 * (e % 2));
            }
        }
        Self {
            qs,
            scales: blocks.map(|b| b.scale),
        }
    }

    pub fn split(&self) -> [BlockQ4_0; SUPER_GROUPS] {
        std::array::from_fn(|g| {
            let codes = std::array::from_fn(|i| self.code(g * GROUP_SIZE + i));
            BlockQ4_0::from_codes(self.scales[g], &codes)
        })
    }

    #[inline]
    pub fn code(&self, e: usize) -> u8 {
        (self.qs[e / 2] >> (4 * (e % 2))) & 0x0F
    }

    pub fn codes(&self) -> [u8; SUPER_SIZE] {
        std::array::from_fn(|e| self.code(e))
    }

    pub fn to_bytes(&self) -> [u8; SUPER_Q4_BYTES] {
        let mut out = [0u8; SUPER_Q4_BYTES];
        out[..128].copy_from_slice(&self.qs);
        for (g, s) in self.scales.iter().enumerate() {
            out[128 + 2 * g..130 + 2 * g].copy_from_slice(&s.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8; SUPER_Q4_BYTES]) -> Self {
        let mut qs = [0u8; 128];
        qs.copy_from_slice(&bytes[..128]);
        Self {
            qs,
            scales: std::array::from_fn(|g| Half::from_le_bytes([bytes[128 + 2 * g], bytes[129 + 2 * g]])),
        }
    }
}

// Equality is bitwise on the serialized form, so -0.0 and NaN scales compare
// the way they are stored.
macro_rules! bitwise_eq {
    ($($t:ty),*) => {$(
        impl PartialEq for $t {
            fn eq(&self, other: &Self) -> bool {
                self.to_bytes() == other.to_bytes()
            }
        }
        impl Eq for $t {}
    )*};
}

bitwise_eq!(BlockQ4_0, BlockQ8_0, SuperBlockQ4);

#[cfg(test)]
mod tests {
    use super::*;

    fn group(f: impl Fn(usize) -> f32) -> [f32; GROUP_SIZE] {
        std::array::from_fn(f)
    }

    #[test]
    fn q4_all_zero() {
        let b = quantize_group_q4_0(&[0.0; 32]);
        assert_eq!(b.scale, Half::ZERO);
        assert!(b.codes().iter().all(|&c| c == 8));
        assert!(b.decode_f32().iter().all(|&v| v == 0.0));
        assert_eq!(b.to_bytes().len(), 18);
    }

    #[test]
    fn q4_signed_max_rule() {
        let g = group(|i| match i {
            0 => -4.0,
            1 => 1.0,
            2 => 3.5,
            3 => 4.0,
            _ => 0.0,
        });
        let b = quantize_group_q4_0(&g);
        assert_eq!(b.scale.to_f32(), 0.5);
        assert_eq!(b.code(0), 0);
        assert_eq!(b.code(1), 10);
        assert_eq!(b.code(2), 15);
        // 4.0 / 0.5 + 8 = 16 saturates.
        assert_eq!(b.code(3), 15);
        assert_eq!(b.code(4), 8);
    }

    #[test]
    fn q4_positive_max_gets_negative_scale() {
        let g = group(|i| if i == 5 { 2.0 } else { -0.25 });
        let b = quantize_group_q4_0(&g);
        assert_eq!(b.scale.to_f32(), -0.25);
        assert_eq!(b.code(5), 0);
        assert_eq!(b.decode_f32()[5], 2.0);
        assert_eq!(b.decode_f32()[0], -0.25);
    }

    #[test]
    fn q4_nibble_order() {
        let codes: [u8; 32] = std::array::from_fn(|i| (i % 16) as u8);
        let b = BlockQ4_0::from_codes(Half::ONE, &codes);
        assert_eq!(b.qs[0], 0x00);
        assert_eq!(b.qs[1], 0x11);
        assert_eq!(b.codes(), codes);
        assert_eq!(BlockQ4_0::from_bytes(&b.to_bytes()), b);
    }

    #[test]
    fn q8_examples() {
        let z = quantize_group_q8_0(&[0.0; 32]);
        assert_eq!(z.scale, Half::ZERO);
        assert!(z.qs.iter().all(|&q| q == 0));

        let g = group(|i| match i {
            0 => 12.7,
            1 => 1.27,
            2 => -12.7,
            _ => 0.0,
        });
        let b = quantize_group_q8_0(&g);
        assert_eq!(b.scale, Half::from_f32(0.1));
        assert_eq!(b.qs[0], 127);
        assert_eq!(b.qs[1], 13);
        assert_eq!(b.qs[2], -127);
        assert_eq!(b.to_bytes().len(), 34);
        assert_eq!(BlockQ8_0::from_bytes(&b.to_bytes()), b);
    }

    #[test]
    fn super_block_zero_and_layout() {
        let zero = quantize_group_q4_0(&[0.0; 32]);
        let sb = SuperBlockQ4::coalesce(&[zero; 8]);
        assert!(sb.scales.iter().all(|s| *s == Half::ZERO));
        assert!(sb.qs.iter().all(|&b| b == 0x88));
        assert_eq!(sb.to_bytes().len(), 144);

        let blocks: [BlockQ4_0; 8] = std::array::from_fn(|g| {
            let codes = std::array::from_fn(|i| ((i + g) % 16) as u8);
            BlockQ4_0::from_codes(Half::from_f32(g as f32), &codes)
        });
        let sb = SuperBlockQ4::coalesce(&blocks);
        // byte i: element 2i low, 2i+1 high
        assert_eq!(sb.qs[0], 0x10);
        assert_eq!(sb.qs[16], (2 << 4) | 1);
        assert_eq!(sb.split(), blocks);
        assert_eq!(SuperBlockQ4::from_bytes(&sb.to_bytes()), sb);
    }
}
