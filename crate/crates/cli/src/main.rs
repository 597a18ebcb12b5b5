use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sdk_core::config::RunConfig;
use sdk_core::pipeline;
use sdk_core::{Error, Result};

#[derive(Parser)]
#[command(name = "sdk", version, about = "Derivative-informed surrogates for shape optimization under uncertainty")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory holding the manifest and artifacts.
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Sample (m, z) pairs and solve their states.
    Generate(Common),
    /// Build the POD and active-subspace bases and the reduced Jacobians.
    Reduce(Common),
    /// Train surrogate(s).
    Train {
        #[command(flatten)]
        common: Common,
        /// Number of models, with training seeds seed, seed + 1, ...
        #[arg(long, default_value_t = 1)]
        replicate: usize,
    },
    /// Optimize the design with the configured risk measure and backend.
    Optimize(Common),
    /// Monte Carlo statistics of the true QoI at the optimized or a given design.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated design vector; defaults to the optimizer result.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        z: Option<Vec<f64>>,
    },
    /// Time PDE solves against surrogate evaluation.
    Bench(Common),
    /// Convert a tracked SDK1 array to CSV.
    Export {
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// File name inside the output directory.
        name: String,
    },
    /// Check all manifest digests.
    Verify {
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Print the example configuration.
    ExampleConfig,
}

fn load(c: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(c) => {
            let man = pipeline::cmd_generate(&load(&c)?, &c.out)?;
            println!("generate: {}", serde_json::to_string(&man.stages["generate"])?);
        }
        Command::Reduce(c) => {
            let man = pipeline::cmd_reduce(&load(&c)?, &c.out)?;
            println!("reduce: {}", serde_json::to_string(&man.stages["reduce"])?);
        }
        Command::Train { common, replicate } => {
            let man = pipeline::cmd_train(&load(&common)?, &common.out, replicate)?;
            println!("train: {}", serde_json::to_string(&man.stages["train"])?);
        }
        Command::Optimize(c) => {
            let (_, r) = pipeline::cmd_optimize(&load(&c)?, &c.out)?;
            println!(
                "optimize: {:?} after {} iterations, objective {:.6e}, projected gradient {:.3e}",
                r.status, r.iterations, r.value, r.proj_grad_norm
            );
        }
        Command::Evaluate { common, z } => {
            let s = pipeline::cmd_evaluate(&load(&common)?, &common.out, z)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::Bench(c) => {
            for r in pipeline::cmd_bench(&load(&c)?, &c.out)? {
                println!(
                    "{:8} state {:.3e}s adjoint {:.3e}s surrogate {:.3e}s surrogate+jac {:.3e}s",
                    r.mode, r.state_solve, r.adjoint_solve, r.surrogate_forward, r.surrogate_jacobian
                );
            }
        }
        Command::Export { out, name } => {
            println!("{}", pipeline::cmd_export(&out, &name)?.display());
        }
        Command::Verify { out } => {
            let bad = pipeline::RunManifest::load(&out)?.verify_all(&out);
            if !bad.is_empty() {
                return Err(Error::Format(format!("digest mismatch: {}", bad.join(", "))));
            }
            println!("ok");
        }
        Command::ExampleConfig => print!("{}", sdk_core::config::EXAMPLE_CONFIG),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
