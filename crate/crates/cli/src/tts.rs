use clap::{Args, ValueEnum};
use tilelut::tts::{run_scaling_sweep, Aggregation, Method, NoisyPrm, SweepConfig, SweepTable, ToyTask};

use crate::error::{invalid, CliError};
use crate::report::Reporter;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Agg {
    Sum,
    Min,
    Last,
}

#[derive(Debug, Args)]
pub struct TtsArgs {
    /// bon, vote or beam.
    #[arg(long)]
    method: Method,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
    budgets: Vec<usize>,
    /// Seeded trials per budget.
    #[arg(long, default_value_t = 1000)]
    seeds: usize,
    /// Base seed; trial `t` uses the same derived seed at every budget.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Probability that one sample reasons soundly.
    #[arg(long, default_value_t = 0.3)]
    p: f64,
    /// Reasoning steps before the answer.
    #[arg(long, default_value_t = 3)]
    steps: usize,
    /// Number of distinct wrong answers, uniformly likely.
    #[arg(long, default_value_t = 5)]
    distractors: usize,
    /// Noise on the process reward; 0 gives the exact verifier.
    #[arg(long, default_value_t = 0.0)]
    prm_sigma: f64,
    /// Step-score aggregation for beam ranking.
    #[arg(long, value_enum, default_value = "sum")]
    aggregation: Agg,
    #[arg(long, default_value_t = 64)]
    max_steps: usize,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

pub fn run(args: &TtsArgs, reporter: &Reporter) -> Result<(), CliError> {
    if args.budgets.is_empty() || args.budgets.contains(&0) {
        return Err(CliError::validation("--budgets must be positive"));
    }
    if args.seeds == 0 {
        return Err(CliError::validation("--seeds must be positive"));
    }
    if !(args.prm_sigma.is_finite() && args.prm_sigma >= 0.0) {
        return Err(CliError::validation("--prm-sigma must be non-negative"));
    }
    let task = ToyTask::uniform(args.p, args.steps, args.distractors).map_err(invalid)?;
    let method = match args.method {
        Method::Beam(_) => Method::Beam(match args.aggregation {
            Agg::Sum => Aggregation::Sum,
            Agg::Min => Aggregation::Min,
            Agg::Last => Aggregation::Last,
        }),
        m => m,
    };
    let mut cfg = SweepConfig::new(args.budgets.clone(), args.seeds, args.seed);
    cfg.max_steps = args.max_steps;
    let correct = task.correct();
    let table: SweepTable = if args.prm_sigma == 0.0 {
        run_scaling_sweep(&task, &task.oracle(), method, &cfg, |a| a == correct)
    } else {
        let prm = NoisyPrm::new(&task, args.prm_sigma, args.seed);
        run_scaling_sweep(&task, &prm, method, &cfg, |a| a == correct)
    }
    .map_err(invalid)?;

    let (csv, json) = (table.to_csv(), table.to_json() + "\n");
    match args.format {
        Format::Csv => print!("{csv}"),
        Format::Json => print!("{json}"),
    }
    let stem = format!("tts-{}", args.method);
    reporter.write(&format!("{stem}.csv"), &csv)?;
    reporter.write(&format!("{stem}.json"), &json)?;
    Ok(())
}
