use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod svg;

use commands::{bench, caption, maskdump, plot, sample, train};

#[derive(Parser)]
#[command(
    name = "hseq",
    version,
    about = "Hybrid token/block sequence models: train, sample, caption, inspect",
    after_help = "Every subcommand is deterministic under a fixed --seed when \
single-threaded (timings excluded). Set HSEQ_THREADS to raise the kernel \
worker count; --deterministic pins it back to one thread."
)]
struct Cli {
    /// Force single-threaded kernels regardless of HSEQ_THREADS.
    #[arg(long, global = true)]
    deterministic: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a staged training schedule from a JSON config.
    Train(train::TrainArgs),
    /// Generate conditioned point clouds from a checkpoint.
    Sample(sample::SampleArgs),
    /// Greedy-decode condition tokens for an XYZ point cloud.
    Caption(caption::CaptionArgs),
    /// Compile a layout's attention mask to CSV and a graymap image.
    Maskdump(maskdump::MaskdumpArgs),
    /// Measure block-decoding throughput across block sizes.
    Bench(bench::BenchArgs),
    /// Overlay metric CSVs into a self-contained SVG chart.
    Plot(plot::PlotArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    // The kernel worker count is read once per process, so this must land
    // before any compute.
    if cli.deterministic {
        std::env::set_var("HSEQ_THREADS", "1");
    }
    let result = match cli.command {
        Command::Train(args) => train::run(args),
        Command::Sample(args) => sample::run(args),
        Command::Caption(args) => caption::run(args),
        Command::Maskdump(args) => maskdump::run(args),
        Command::Bench(args) => bench::run(args),
        Command::Plot(args) => plot::run(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
