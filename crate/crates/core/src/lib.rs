//! Tile-layout weight quantization, table-driven FP16 kernels and parallel
//! test-time-scaling search.
//!
//! * [`numerics`]: FP16 helpers, polynomial `exp2`, the 32768-entry `exp2` table.
//! * [`tile_layout`]: 32x32 matrix-unit tile layout and its index map.
//! * [`quantize`]: tile-group and conventional Q4_0/Q8_0 quantization,
//!   super-block coalescing, LUT dequantization.
//! * [`gemm`]: emulated FP16 tile GEMM with FP32 accumulation and the fused
//!   dequantize-GEMM path.
//! * [`attention`]: FP16 flash attention with table exponentials.
//! * [`tts`]: Best-of-N, majority voting and step-level beam search.
//! * [`tensor_io`]: the `TQK1` tensor container.

pub mod attention;
pub mod gemm;
pub mod matrix;
pub mod numerics;
pub mod quantize;
pub mod tensor_io;
pub mod tile_layout;
pub mod tts;

pub use matrix::{Matrix, ShapeError};
pub use numerics::{ExpLut, Half};
