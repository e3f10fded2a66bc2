use std::collections::HashSet;
use std::path::PathBuf;

use clap::Args;
use glob::Pattern;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use tilelut::quantize::{coalesce_super_blocks, quantize_tensor, quantize_tensor_f16, Grouping, QuantTensor, Scheme};
use tilelut::tensor_io::{read_tensor_file, write_tensor_file, TensorData, TensorRecord};
use tilelut::tile_layout::from_tiled;
use tilelut::tts::derive_seed;
use tilelut::{Half, Matrix};

use crate::error::{invalid, CliError};
use crate::report::Reporter;

/// Name patterns that get Q8_0 unless overridden: FFN down projections.
const DEFAULT_OVERRIDES: [(&str, Scheme); 2] = [("*ffn_down*", Scheme::Q8_0), ("*down_proj*", Scheme::Q8_0)];

#[derive(Debug, Args)]
pub struct QuantizeArgs {
    /// Input tensor file. FP16 rank-2 tensors are quantized, others copied.
    #[arg(long, short)]
    input: Option<PathBuf>,
    /// Generate a Gaussian tensor instead of reading one (`name:RxC`, repeatable).
    #[arg(long = "random", value_name = "NAME:RxC")]
    random: Vec<String>,
    /// Output tensor file.
    #[arg(long, short)]
    output: PathBuf,
    #[arg(long, default_value = "q4_0")]
    scheme: Scheme,
    #[arg(long, default_value = "tile")]
    grouping: Grouping,
    /// Pack Q4_0 tile groups into 144-byte super-blocks.
    #[arg(long)]
    coalesce: bool,
    /// Per-tensor scheme by name glob (`pattern=scheme`); the last match wins.
    #[arg(long = "override", value_name = "GLOB=SCHEME")]
    overrides: Vec<String>,
    /// Do not route FFN down projections to Q8_0 by default.
    #[arg(long)]
    no_default_overrides: bool,
    /// Seed for `--random` tensors.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Standard deviation of `--random` tensors.
    #[arg(long, default_value_t = 1.0)]
    std: f32,
}

#[derive(Debug, Serialize)]
struct TensorSummary {
    name: String,
    dims: Vec<usize>,
    action: &'static str,
    scheme: Option<Scheme>,
    grouping: Option<Grouping>,
    coalesced: bool,
    bytes: usize,
    bits_per_weight: Option<f64>,
}

#[derive(Debug, Serialize)]
struct QuantizeReport {
    output: PathBuf,
    tensors: Vec<TensorSummary>,
    quantized_bytes: usize,
    quantized_weights: usize,
    bits_per_weight: Option<f64>,
}

pub struct SchemeRules {
    rules: Vec<(Pattern, Scheme)>,
    default: Scheme,
}

impl SchemeRules {
    pub fn new(default: Scheme, builtin: bool, overrides: &[String]) -> Result<Self, CliError> {
        let mut rules = Vec::new();
        if builtin {
            for (p, s) in DEFAULT_OVERRIDES {
                rules.push((Pattern::new(p).expect("static pattern"), s));
            }
        }
        for o in overrides {
            let (glob, scheme) = o
                .rsplit_once('=')
                .ok_or_else(|| CliError::validation(format!("override `{o}` is not GLOB=SCHEME")))?;
            let pattern = Pattern::new(glob).map_err(|e| CliError::validation(format!("override `{o}`: {e}")))?;
            rules.push((pattern, scheme.parse().map_err(CliError::Validation)?));
        }
        Ok(Self { rules, default })
    }

    pub fn scheme_for(&self, name: &str) -> Scheme {
        self.rules
            .iter()
            .rev()
            .find(|(p, _)| p.matches(name))
            .map_or(self.default, |(_, s)| *s)
    }
}

fn parse_random(spec: &str) -> Result<(String, usize, usize), CliError> {
    let bad = || CliError::validation(format!("random tensor `{spec}` is not NAME:RxC"));
    let (name, shape) = spec.rsplit_once(':').ok_or_else(bad)?;
    let (r, c) = shape.split_once('x').ok_or_else(bad)?;
    let (r, c): (usize, usize) = (r.parse().map_err(|_| bad())?, c.parse().map_err(|_| bad())?);
    if name.is_empty() || r == 0 || c == 0 {
        return Err(bad());
    }
    Ok((name.to_string(), r, c))
}

enum Source {
    F32(Matrix<f32>),
    F16(Matrix<Half>),
    Keep(TensorData),
}

fn quantize_one(src: &Source, scheme: Scheme, grouping: Grouping, coalesce: bool) -> Result<QuantTensor, CliError> {
    let q = match src {
        Source::F32(m) => quantize_tensor(m, scheme, grouping),
        Source::F16(m) => quantize_tensor_f16(m, scheme, grouping),
        Source::Keep(_) => unreachable!("kept tensors are not quantized"),
    }
    .map_err(invalid)?;
    if coalesce && scheme == Scheme::Q4_0 {
        coalesce_super_blocks(&q).map_err(invalid)
    } else {
        Ok(q)
    }
}

pub fn run(args: &QuantizeArgs, reporter: &Reporter) -> Result<(), CliError> {
    if args.input.is_none() && args.random.is_empty() {
        return Err(CliError::validation("nothing to quantize: pass --input or --random"));
    }
    if args.coalesce && args.grouping == Grouping::Conventional {
        return Err(CliError::validation("--coalesce needs --grouping tile"));
    }
    if !(args.std.is_finite() && args.std > 0.0) {
        return Err(CliError::validation("--std must be positive"));
    }
    let rules = SchemeRules::new(args.scheme, !args.no_default_overrides, &args.overrides)?;

    let mut sources: Vec<(String, Source)> = Vec::new();
    if let Some(path) = &args.input {
        for rec in read_tensor_file(path).map_err(|e| CliError::tensor_file(path, e))? {
            let src = match rec.data {
                TensorData::F16 { dims, data } if dims.len() == 2 => {
                    Source::F16(Matrix::from_vec(dims[0], dims[1], data).map_err(invalid)?)
                }
                TensorData::F16Tiled(t) => Source::F16(from_tiled(&t)),
                other => Source::Keep(other),
            };
            sources.push((rec.name, src));
        }
    }
    for (i, spec) in args.random.iter().enumerate() {
        let (name, r, c) = parse_random(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(args.seed, &[i as u64]));
        let m = Matrix::from_fn(r, c, |_, _| {
            let z: f32 = StandardNormal.sample(&mut rng);
            z * args.std
        });
        sources.push((name, Source::F32(m)));
    }
    let mut seen = HashSet::new();
    for (name, _) in &sources {
        if !seen.insert(name.as_str()) {
            return Err(CliError::validation(format!("duplicate tensor name `{name}`")));
        }
    }

    let mut records = Vec::with_capacity(sources.len());
    let mut summaries = Vec::with_capacity(sources.len());
    for (name, src) in sources {
        let (data, summary) = match src {
            Source::Keep(data) => {
                let summary = TensorSummary {
                    name: name.clone(),
                    dims: data.dims(),
                    action: "copied",
                    scheme: None,
                    grouping: None,
                    coalesced: false,
                    bytes: data.payload_len(),
                    bits_per_weight: None,
                };
                (data, summary)
            }
            src => {
                let scheme = rules.scheme_for(&name);
                let q = quantize_one(&src, scheme, args.grouping, args.coalesce)?;
                let summary = TensorSummary {
                    name: name.clone(),
                    dims: vec![q.rows(), q.cols()],
                    action: "quantized",
                    scheme: Some(scheme),
                    grouping: Some(args.grouping),
                    coalesced: q.is_coalesced(),
                    bytes: q.byte_len(),
                    bits_per_weight: Some(q.bits_per_weight()),
                };
                (TensorData::Quant(q), summary)
            }
        };
        records.push(TensorRecord::new(name, data));
        summaries.push(summary);
    }

    write_tensor_file(&args.output, &records).map_err(|e| CliError::tensor_file(&args.output, e))?;

    let quantized: Vec<&TensorSummary> = summaries.iter().filter(|s| s.scheme.is_some()).collect();
    let quantized_bytes: usize = quantized.iter().map(|s| s.bytes).sum();
    // Logical weights, so padding shows up as a higher rate.
    let quantized_weights: usize = quantized.iter().map(|s| s.dims.iter().product::<usize>()).sum();
    let bpw = (quantized_weights > 0).then(|| quantized_bytes as f64 * 8.0 / quantized_weights as f64);

    for s in &summaries {
        let dims: Vec<String> = s.dims.iter().map(|d| d.to_string()).collect();
        match (s.scheme, s.grouping, s.bits_per_weight) {
            (Some(scheme), Some(grouping), Some(b)) => println!(
                "{:<32} {:>11} {:<5} {:<12} {:<9} {:>10} B {:>6.3} bpw",
                s.name,
                dims.join("x"),
                scheme,
                grouping,
                if s.coalesced { "coalesced" } else { "" },
                s.bytes,
                b
            ),
            _ => println!("{:<32} {:>11} copied {:>34} B", s.name, dims.join("x"), s.bytes),
        }
    }
    match bpw {
        Some(b) => println!(
            "wrote {} tensors to {}: {} quantized bytes, {:.3} bpw",
            records.len(),
            args.output.display(),
            quantized_bytes,
            b
        ),
        None => println!("wrote {} tensors to {}: nothing quantized", records.len(), args.output.display()),
    }

    let report = QuantizeReport {
        output: args.output.clone(),
        tensors: summaries,
        quantized_bytes,
        quantized_weights,
        bits_per_weight: bpw,
    };
    reporter.write_json("quantize.json", &report)?;
    Ok(())
}
