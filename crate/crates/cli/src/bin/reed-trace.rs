use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use reed_core::chunker::SegmentationParams;
use reed_core::{Error, Result, Scheme};
use reed_trace::{generate_trace, replay, GenParams, Mode, ReplayParams, Trace};

#[derive(Parser)]
#[command(name = "reed-trace", version, about = "Generate and replay fingerprint traces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Replay a trace through an in-process store and report sizes.
    Replay {
        trace: PathBuf,
        #[arg(long, value_enum, default_value_t = ModeArg::Similarity)]
        mode: ModeArg,
        #[arg(long, default_value = "1M", value_parser = reed_cli::parse_size)]
        avg_segment: u64,
        /// Average chunk size the segment divisor is computed from.
        #[arg(long, default_value = "8K", value_parser = reed_cli::parse_size)]
        avg_chunk: u64,
        /// TSV report path; stdout when omitted.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Drop records whose chunk would be all zeros.
        #[arg(long)]
        filter_zero: bool,
        #[arg(long)]
        basic: bool,
        /// Keep the store here instead of a temporary directory.
        #[arg(long)]
        store_dir: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a synthetic trace.
    Gen {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        snapshots: usize,
        #[arg(long, default_value_t = 1024)]
        chunks: usize,
        /// Fraction of chunks replaced per snapshot.
        #[arg(long, default_value_t = 0.1)]
        mutate: f64,
        #[arg(long, default_value = "8K", value_parser = reed_cli::parse_size)]
        avg_chunk: u64,
        /// Contiguous runs the replaced chunks are split into.
        #[arg(long, default_value_t = 1)]
        runs: usize,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Chunk,
    Similarity,
}

fn write_out(path: Option<&PathBuf>, text: &str) -> Result<()> {
    match path {
        Some(p) => Ok(std::fs::write(p, text)?),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Replay {
            trace,
            mode,
            avg_segment,
            avg_chunk,
            report,
            filter_zero,
            basic,
            store_dir,
            seed,
        } => {
            let text = std::fs::read_to_string(&trace)?;
            let t = Trace::parse(&text)?;
            let params = ReplayParams {
                mode: match mode {
                    ModeArg::Chunk => Mode::Chunk,
                    ModeArg::Similarity => Mode::Similarity,
                },
                segmentation: SegmentationParams::new(avg_segment, avg_chunk),
                scheme: if basic { Scheme::Basic } else { Scheme::Enhanced },
                filter_zero,
                store_dir,
                seed,
                ..Default::default()
            };
            let r = replay(&t, &params)?;
            write_out(report.as_ref(), &r.to_tsv())
        }
        Command::Gen {
            seed,
            snapshots,
            chunks,
            mutate,
            avg_chunk,
            runs,
            output,
        } => {
            let avg_chunk = u32::try_from(avg_chunk).map_err(|_| Error::InvalidConfig("average chunk too large".into()))?;
            let t = generate_trace(&GenParams {
                seed,
                snapshots,
                chunks,
                mutate,
                avg_chunk,
                runs,
            })?;
            write_out(output.as_ref(), &t.to_text())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match reed_cli::parse_args::<Cli>() {
        Ok(cli) => reed_cli::finish(run(cli)),
        Err(code) => code,
    }
}
