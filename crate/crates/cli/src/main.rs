use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use otafl_core::data::SyntheticSpec;
use otafl_core::experiment::{cmd_compare, cmd_gen_data, cmd_run, format_compare_table};
use otafl_core::Error;

#[derive(Parser)]
#[command(name = "otafl", version, about = "Over-the-air federated learning with magnitude pruning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write metrics.csv, summary.json and checkpoints.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare one-shot and iterative pruning across sparsities and participation levels.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.3,0.5,0.7,0.9")]
        sparsities: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic dataset as CSV.
    GenData {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long)]
        classes: usize,
        #[arg(long = "per-class")]
        per_class: usize,
        /// Feature dimension (blobs only).
        #[arg(long)]
        dim: Option<usize>,
        /// Gaussian jitter (spirals only).
        #[arg(long)]
        noise: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Blobs,
    Spirals,
}

fn usage(message: &str) -> ExitCode {
    eprintln!("error: {message}");
    ExitCode::from(2)
}

fn failure(err: Error) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(if err.is_usage() { 2 } else { 1 })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, out } => match cmd_run(&config, &out) {
            Ok(summary) => {
                println!(
                    "{} rounds, final accuracy {}, final sparsity {:.4}",
                    summary.round_count,
                    summary.final_accuracy.map_or("n/a".into(), |a| format!("{a:.4}")),
                    summary.final_sparsity
                );
                ExitCode::SUCCESS
            }
            Err(e) => failure(e),
        },
        Command::Compare { config, sparsities, out } => match cmd_compare(&config, &sparsities, &out) {
            Ok(cells) => {
                print!("{}", format_compare_table(&cells));
                ExitCode::SUCCESS
            }
            Err(e) => failure(e),
        },
        Command::GenData {
            kind,
            classes,
            per_class,
            dim,
            noise,
            seed,
            out,
        } => {
            let spec = match (kind, dim, noise) {
                (Kind::Blobs, Some(dim), None) => SyntheticSpec::blobs(classes, per_class, dim, seed),
                (Kind::Blobs, _, _) => return usage("blobs need --dim and take no --noise"),
                (Kind::Spirals, None, noise) => SyntheticSpec::spirals(classes, per_class, noise.unwrap_or(0.0), seed),
                (Kind::Spirals, Some(_), _) => return usage("spirals are two-dimensional; drop --dim"),
            };
            match cmd_gen_data(&spec, &out) {
                Ok(ds) => {
                    println!("N={} d={} C={}", ds.len(), ds.feature_dim(), ds.num_classes());
                    ExitCode::SUCCESS
                }
                Err(e) => failure(e),
            }
        }
    }
}
