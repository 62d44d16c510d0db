//! `latentlab`: fit, sample, evaluate and query latent variable models from
//! the command line.
//!
//! Exit codes: 0 on success, 2 on a usage error (bad flags, configuration or
//! input files), 1 when the numerics fail. `LATENTLAB_THREADS` caps the worker
//! pool.

mod config;
mod error;
mod model;
mod output;
mod sample;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use latentlab_core::datasets::{format_f64, write_csv, write_model};
use latentlab_core::datasets::Dataset;
use latentlab_core::RandomSource;

use config::{FitFlags, RunConfig};
use error::{CliError, CliResult};
use model::{Family, Saved};
use output::{sibling, write_table, write_trace};
use sample::{SampleRequest, Source};

#[derive(Parser)]
#[command(name = "latentlab", version, about = "Latent variable models: fit, sample, eval, infer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model and write it with its objective trace.
    Fit {
        #[arg(value_enum)]
        family: Family,
        /// Training data: CSV, a sequence file (hmm, ghmm, lds) or a corpus (lda).
        #[arg(long)]
        data: PathBuf,
        /// Model file to write; the trace goes to `<out>.trace.csv`.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        flags: FitFlags,
    },
    /// Draw observations from a fitted model.
    Sample {
        model: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Source::Prior)]
        from: Source,
        /// Observations to condition on with `--from posterior`.
        #[arg(long)]
        given: Option<PathBuf>,
        /// Length of sampled sequences and documents.
        #[arg(long, default_value_t = 100)]
        length: usize,
        /// Binary draws from a Bernoulli VAE instead of probabilities.
        #[arg(long)]
        binary: bool,
    },
    /// Print the log-likelihood (or ELBO) of every observation and the total.
    Eval {
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Monte Carlo draws per observation for stochastic bounds.
        #[arg(long, default_value_t = 100)]
        samples: usize,
    },
    /// Write posterior summaries for every observation.
    Infer {
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Map observations through the latent space and back (ppca, vae).
    Reconstruct {
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset with known ground truth.
    Synth {
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn configure_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("LATENTLAB_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::usage(format!("LATENTLAB_THREADS must be a positive integer, got '{v}'")))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::usage(format!("thread pool: {e}")))?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    match cli.command {
        Command::Fit { family, data, out, flags } => {
            let mut config = RunConfig::from_flags(&flags, family)?;
            let (model, trace) = model::fit(family, &data, &mut config)?;
            let saved = Saved { model, config };
            write_model(&out, &saved.to_file()?)?;
            write_trace(&sibling(&out, ".trace.csv"), &trace)?;
        }
        Command::Sample { model, n, out, seed, from, given, length, binary } => {
            let saved = Saved::read(&model)?;
            let req = SampleRequest { n, from, given: given.as_deref(), length, binary };
            sample::sample(&saved, &req, &mut RandomSource::new(seed))?.write(&out)?;
        }
        Command::Eval { model, data, seed, samples } => {
            let saved = Saved::read(&model)?;
            let scores = model::eval(&saved, &data, samples, &mut RandomSource::new(seed))?;
            let mut text = format!("index,{}\n", scores.kind);
            for (i, v) in scores.points.iter().enumerate() {
                text.push_str(&format!("{i},{}\n", format_f64(*v)));
            }
            text.push_str(&format!("total,{}\n", format_f64(scores.total)));
            std::io::stdout().lock().write_all(text.as_bytes())?;
        }
        Command::Infer { model, data, out } => {
            let saved = Saved::read(&model)?;
            write_table(&out, &model::infer(&saved, &data)?)?;
        }
        Command::Reconstruct { model, data, out } => {
            let saved = Saved::read(&model)?;
            write_csv(&out, &Dataset::from_mat(model::reconstruct(&saved, &data)?))?;
        }
        Command::Synth { spec, out } => sample::synth(&spec, &out)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // help and version exit 0, parse errors exit 2
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("latentlab: error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
