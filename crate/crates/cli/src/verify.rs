use std::collections::HashMap;
use std::path::PathBuf;

use clap::Args;
use serde::Serialize;
use tilelut::quantize::{
    coalesce_super_blocks, dequantize_tensor, dequantize_to_tiled, non_canonical_groups, quantize_tensor_f16,
    split_super_blocks, DequantizedTensor, QuantBlocks, QuantTensor, GROUP_SIZE, Q4_0_BYTES, Q8_0_BYTES,
    SUPER_GROUPS, SUPER_Q4_BYTES,
};
use tilelut::tensor_io::{read_tensor_file, TensorData, TensorRecord};
use tilelut::tile_layout::{from_tiled, to_tiled};
use tilelut::{Half, Matrix};

use crate::error::{invalid, CliError};
use crate::report::Reporter;

/// Findings printed per tensor before the rest are summarized.
const MAX_PRINTED: usize = 8;

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Tensor file to check.
    file: PathBuf,
    /// Unquantized source file; quantized tensors must match its re-quantization.
    #[arg(long)]
    reference: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
struct Finding {
    tensor: String,
    check: &'static str,
    /// Quantization group index in storage order.
    group: Option<usize>,
    /// File offset of the block holding the group.
    byte_offset: Option<usize>,
    /// First logical element of the group.
    row: Option<usize>,
    col: Option<usize>,
    detail: String,
}

#[derive(Debug, Serialize)]
struct TensorVerdict {
    name: String,
    checks: Vec<&'static str>,
    passed: bool,
}

#[derive(Debug, Serialize)]
struct VerifyReport {
    file: PathBuf,
    reference: Option<PathBuf>,
    passed: bool,
    tensors: Vec<TensorVerdict>,
    findings: Vec<Finding>,
}

/// Byte offset of each record's payload in the encoded file.
fn payload_offsets(records: &[TensorRecord]) -> Vec<usize> {
    let mut at = 8;
    records
        .iter()
        .map(|r| {
            let header = 4 + r.name.len() + 3 + 8 * r.data.dims().len() + 8;
            let off = at + header;
            at = off + r.data.payload_len();
            off
        })
        .collect()
}

/// Serialized bytes of every group, splitting super-blocks.
fn group_bytes(q: &QuantTensor) -> Vec<Vec<u8>> {
    match q.blocks() {
        QuantBlocks::Q4_0(b) => b.iter().map(|b| b.to_bytes().to_vec()).collect(),
        QuantBlocks::Q8_0(b) => b.iter().map(|b| b.to_bytes().to_vec()).collect(),
        QuantBlocks::Q4Super(s) => s.iter().flat_map(|s| s.split()).map(|b| b.to_bytes().to_vec()).collect(),
    }
}

/// Offset of the block holding group `g`, relative to the payload.
fn block_offset(q: &QuantTensor, g: usize) -> usize {
    match q.blocks() {
        QuantBlocks::Q4_0(_) => g * Q4_0_BYTES,
        QuantBlocks::Q8_0(_) => g * Q8_0_BYTES,
        QuantBlocks::Q4Super(_) => g / SUPER_GROUPS * SUPER_Q4_BYTES,
    }
}

fn bits(s: &[Half]) -> Vec<u16> {
    s.iter().map(|h| h.to_bits()).collect()
}

struct Checker<'a> {
    name: &'a str,
    payload: usize,
    findings: Vec<Finding>,
}

impl Checker<'_> {
    fn fail(&mut self, check: &'static str, detail: impl Into<String>) {
        self.findings.push(Finding {
            tensor: self.name.to_string(),
            check,
            group: None,
            byte_offset: None,
            row: None,
            col: None,
            detail: detail.into(),
        });
    }

    fn fail_group(&mut self, q: &QuantTensor, check: &'static str, g: usize, detail: impl Into<String>) {
        let coord = q.storage_coord(g * GROUP_SIZE);
        self.findings.push(Finding {
            tensor: self.name.to_string(),
            check,
            group: Some(g),
            byte_offset: Some(self.payload + block_offset(q, g)),
            row: coord.map(|c| c.0),
            col: coord.map(|c| c.1),
            detail: detail.into(),
        });
    }

    fn quant(&mut self, q: &QuantTensor, reference: Option<&Matrix<Half>>, checks: &mut Vec<&'static str>) {
        checks.push("canonical");
        for g in non_canonical_groups(q) {
            self.fail_group(q, "canonical", g, "block does not re-quantize to itself");
        }

        if q.is_coalesced() {
            checks.push("super_block_lossless");
            let split = split_super_blocks(q).expect("coalesced tensor splits");
            let (DequantizedTensor::Tiled(a), DequantizedTensor::Tiled(b)) = (dequantize_tensor(q), dequantize_tensor(&split))
            else {
                unreachable!("super-blocks are tile grouped")
            };
            if bits(a.as_slice()) != bits(b.as_slice()) || coalesce_super_blocks(&split).as_ref() != Ok(q) {
                self.fail("super_block_lossless", "super-block and unpacked forms differ");
            }
        }

        checks.push("layout_bijective");
        let direct = dequantize_tensor(q);
        let row_major = direct.to_row_major();
        let retiled = to_tiled(&row_major).expect("non-empty tensor");
        if bits(from_tiled(&retiled).as_slice()) != bits(row_major.as_slice()) {
            self.fail("layout_bijective", "tile round trip changed values");
        }
        let (scattered, _) = dequantize_to_tiled(q);
        if bits(scattered.as_slice()) != bits(retiled.as_slice()) {
            self.fail("layout_bijective", "tiled dequantization differs from the row-major decode");
        }

        if let Some(src) = reference {
            checks.push("reference");
            if (src.rows(), src.cols()) != (q.rows(), q.cols()) {
                self.fail(
                    "reference",
                    format!("shape {}x{} differs from reference {}x{}", q.rows(), q.cols(), src.rows(), src.cols()),
                );
                return;
            }
            let expect = quantize_tensor_f16(src, q.scheme(), q.grouping()).expect("reference quantizes");
            let (got, want) = (group_bytes(q), group_bytes(&expect));
            for (g, (a, b)) in got.iter().zip(&want).enumerate() {
                if a != b {
                    let what = if a[..2] != b[..2] { "scale" } else { "codes" };
                    self.fail_group(q, "reference", g, format!("{what} differ from re-quantized reference"));
                }
            }
        }
    }

    fn tiled(&mut self, t: &tilelut::tile_layout::TiledF16Matrix, checks: &mut Vec<&'static str>) {
        checks.push("layout_bijective");
        let back = to_tiled(&from_tiled(t)).expect("non-empty tensor");
        if bits(back.as_slice()) != bits(t.as_slice()) {
            self.fail("layout_bijective", "padding elements are not zero");
        }
    }
}

fn load_reference(path: &PathBuf) -> Result<HashMap<String, Matrix<Half>>, CliError> {
    let mut out = HashMap::new();
    for rec in read_tensor_file(path).map_err(|e| CliError::tensor_file(path, e))? {
        let m = match rec.data {
            TensorData::F16 { dims, data } if dims.len() == 2 => Matrix::from_vec(dims[0], dims[1], data).map_err(invalid)?,
            TensorData::F16Tiled(t) => from_tiled(&t),
            _ => continue,
        };
        out.insert(rec.name, m);
    }
    Ok(out)
}

pub fn run(args: &VerifyArgs, reporter: &Reporter) -> Result<(), CliError> {
    let records = read_tensor_file(&args.file).map_err(|e| CliError::tensor_file(&args.file, e))?;
    let reference = args.reference.as_ref().map(load_reference).transpose()?;

    let mut verdicts = Vec::new();
    let mut findings = Vec::new();
    for (rec, payload) in records.iter().zip(payload_offsets(&records)) {
        let mut c = Checker {
            name: &rec.name,
            payload,
            findings: Vec::new(),
        };
        let mut checks = Vec::new();
        match &rec.data {
            TensorData::Quant(q) => {
                let src = reference.as_ref().and_then(|r| r.get(&rec.name));
                c.quant(q, src, &mut checks);
            }
            TensorData::F16Tiled(t) => c.tiled(t, &mut checks),
            TensorData::F16 { .. } => checks.push("shape"),
        }
        let passed = c.findings.is_empty();
        let label = match &rec.data {
            TensorData::Quant(q) if q.is_coalesced() => format!("{} super", q.scheme()),
            TensorData::Quant(q) => format!("{} {}", q.scheme(), q.grouping()),
            TensorData::F16Tiled(_) => "f16 tiled".into(),
            TensorData::F16 { .. } => "f16".into(),
        };
        println!("{:<4} {:<32} {:<16} {}", if passed { "ok" } else { "FAIL" }, rec.name, label, checks.join(","));
        for f in c.findings.iter().take(MAX_PRINTED) {
            match (f.group, f.byte_offset) {
                (Some(g), Some(off)) => println!(
                    "     {}: group {} (block at byte {}, row {}, col {}): {}",
                    f.check,
                    g,
                    off,
                    f.row.map_or("-".into(), |r| r.to_string()),
                    f.col.map_or("-".into(), |c| c.to_string()),
                    f.detail
                ),
                _ => println!("     {}: {}", f.check, f.detail),
            }
        }
        if c.findings.len() > MAX_PRINTED {
            println!("     ... {} more", c.findings.len() - MAX_PRINTED);
        }
        verdicts.push(TensorVerdict {
            name: rec.name.clone(),
            checks,
            passed,
        });
        findings.extend(c.findings);
    }

    let failed = verdicts.iter().filter(|v| !v.passed).count();
    println!("verify: {} tensors, {} failed, {} findings", verdicts.len(), failed, findings.len());
    let report = VerifyReport {
        file: args.file.clone(),
        reference: args.reference.clone(),
        passed: failed == 0,
        tensors: verdicts,
        findings,
    };
    reporter.write_json("verify.json", &report)?;
    if failed > 0 {
        return Err(CliError::validation(format!("{failed} tensor(s) failed verification")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use tilelut::quantize::{quantize_tensor, Grouping, Scheme};
    use tilelut::tensor_io::encode_tensor_file;

    #[test]
    fn payload_offsets_match_encoding() {
        let m = Matrix::from_fn(40, 33, |r, c| (r as f32 - c as f32) / 50.0);
        let records = vec![
            TensorRecord::new("first", TensorData::Quant(quantize_tensor(&m, Scheme::Q4_0, Grouping::Tile).unwrap())),
            TensorRecord::new("b", TensorData::F16 { dims: vec![3, 1, 2], data: vec![Half::ONE; 6] }),
            TensorRecord::new("q8", TensorData::Quant(quantize_tensor(&m, Scheme::Q8_0, Grouping::Conventional).unwrap())),
        ];
        let bytes = encode_tensor_file(&records);
        for (r, off) in records.iter().zip(payload_offsets(&records)) {
            let mut alone = Vec::new();
            match &r.data {
                TensorData::Quant(q) => group_bytes(q).iter().for_each(|g| alone.extend_from_slice(g)),
                TensorData::F16 { data, .. } => data.iter().for_each(|h| alone.extend_from_slice(&h.to_le_bytes())),
                TensorData::F16Tiled(_) => unreachable!(),
            }
            assert_eq!(&bytes[off..off + alone.len()], &alone[..], "{}", r.name);
        }
    }
}
