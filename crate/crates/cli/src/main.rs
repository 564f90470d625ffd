use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use torsionflow::config::RunConfig;
use torsionflow::pipeline::{self, PipelineError, SampleRequest};

/// Continuous GFlowNet sampler for torsion-angle Boltzmann distributions.
#[derive(Parser)]
#[command(name = "torsionflow", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a sampler; writes checkpoint.json and train_log.csv.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Draw samples from a trained checkpoint into samples.csv.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        /// Optional config; its oracle and eval settings override the checkpoint's.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Add an importance-sampled log_pi column.
        #[arg(long)]
        with_likelihood: bool,
    },
    /// Run the adaptive Metropolis-Hastings baseline.
    Mcmc {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Score a sample file; writes metrics.json and, in 1-D and 2-D, kde_grid.csv.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Sample CSV to evaluate.
        samples: PathBuf,
        /// Reference sample CSV for COV/MAT.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Train, run MCMC and evaluate both; writes compare.json.
    Compare {
        #[command(flatten)]
        run: RunArgs,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        if e.is_usage() {
            Failure::Usage(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn load(path: &Path, seed: Option<u64>, out: Option<&PathBuf>) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(path).map_err(|e| Failure::Usage(e.to_string()))?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig, Failure> {
        load(&self.config, self.seed, self.out.as_ref())
    }
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serialisable"));
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train { run, checkpoint } => {
            let cfg = run.config()?;
            let report = pipeline::train(&cfg, &cfg.out, checkpoint.as_deref())?;
            if let Some(last) = report.log.last() {
                println!("iterations {} loss {:.6} logZ {:.6}", last.iteration, last.loss, last.log_z);
            }
            println!("checkpoint {}", report.checkpoint.display());
            println!("log {}", report.log_path.display());
        }
        Command::Sample { checkpoint, n, config, seed, out, with_likelihood } => {
            let cfg = config.as_deref().map(|p| load(p, seed, out.as_ref())).transpose()?;
            let seed = seed.or(cfg.as_ref().map(|c| c.seed)).unwrap_or(0);
            let out = out.or(cfg.as_ref().map(|c| c.out.clone())).unwrap_or_else(|| PathBuf::from("out"));
            let req = SampleRequest { checkpoint: &checkpoint, config: cfg.as_ref(), n, with_likelihood, seed, out: &out };
            let set = pipeline::sample(&req)?;
            println!("{} samples written to {}", set.len(), out.join(pipeline::SAMPLES_FILE).display());
        }
        Command::Mcmc { run } => {
            let cfg = run.config()?;
            let (_, diagnostics) = pipeline::mcmc(&cfg, &cfg.out)?;
            print_json(&diagnostics);
        }
        Command::Eval { run, samples, reference } => {
            let cfg = run.config()?;
            let metrics = pipeline::evaluate(&cfg, &samples, reference.as_deref(), &cfg.out)?;
            print_json(&metrics);
        }
        Command::Compare { run } => {
            let cfg = run.config()?;
            let report = pipeline::compare(&cfg, &cfg.out)?;
            print_json(&serde_json::json!({ "gflownet": report.gflownet, "mcmc": report.mcmc }));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
