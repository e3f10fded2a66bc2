mod bench;
mod error;
mod quantize;
mod report;
mod tts;
mod verify;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use error::CliError;
use report::Reporter;

#[derive(Debug, Parser)]
#[command(name = "tilelut", version, about = "Tile-layout quantization, LUT kernels and test-time search")]
struct Cli {
    /// Directory that receives JSON/CSV reports.
    #[arg(long, global = true, env = "TILELUT_REPORT_DIR")]
    report_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Quantize FP16 tensors into Q4_0/Q8_0 block files.
    Quantize(quantize::QuantizeArgs),
    /// Check a tensor file for canonical blocks and lossless layouts.
    Verify(verify::VerifyArgs),
    /// Time kernels and report operation counts.
    Bench(bench::BenchArgs),
    /// Accuracy-versus-budget sweep on the synthetic reasoning task.
    Tts(tts::TtsArgs),
}

fn run(cli: Cli) -> Result<(), CliError> {
    let reporter = Reporter::new(cli.report_dir);
    match cli.command {
        Command::Quantize(args) => quantize::run(&args, &reporter),
        Command::Verify(args) => verify::run(&args, &reporter),
        Command::Bench(args) => bench::run(&args, &reporter),
        Command::Tts(args) => tts::run(&args, &reporter),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
