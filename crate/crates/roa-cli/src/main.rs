//! `roa`: outer approximations of regions of attraction for polynomial
//! control systems, with optimization of the time/state split positions.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{Ctx, EXIT_CONFIG};
use config::RunConfig;
use roa_core::optim::GradMethod;

#[derive(Parser)]
#[command(name = "roa", version, about = "Split sum-of-squares ROA toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct CommonArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Relaxation degree override.
    #[arg(long)]
    degree: Option<u32>,
    /// Gradient method override.
    #[arg(long, value_parser = parse_grad)]
    grad: Option<GradMethod>,
    /// Solver tolerance override.
    #[arg(long)]
    tol: Option<f64>,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "roa-out")]
    out: PathBuf,
    /// Worker thread cap.
    #[arg(long)]
    threads: Option<usize>,
}

fn parse_grad(s: &str) -> Result<GradMethod, String> {
    match s {
        "qr" => Ok(GradMethod::Qr),
        "lsqr" => Ok(GradMethod::Lsqr),
        "fd" => Ok(GradMethod::Fd),
        other => Err(format!("unknown gradient method '{other}' (qr|lsqr|fd)")),
    }
}

#[derive(Subcommand)]
enum Command {
    /// Compile and solve one configuration; write certificate, volume
    /// estimate and plot grid.
    Solve {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Optimize split positions (or evaluate a recorded path at another
    /// degree with --eval-path).
    Optimize {
        #[command(flatten)]
        common: CommonArgs,
        /// Iteration count override.
        #[arg(long)]
        iters: Option<usize>,
        /// Evaluate this recorded trace instead of optimizing.
        #[arg(long)]
        eval_path: Option<PathBuf>,
    },
    /// Compare the qr, lsqr and fd gradients at one configuration.
    Gradcheck {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Wall-time sweep of the gradient methods over parameter counts and
    /// degrees.
    Benchmark {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Export the compiled conic program for cross-solver validation.
    Export {
        #[command(flatten)]
        common: CommonArgs,
    },
}

fn load_ctx(common: &CommonArgs) -> anyhow::Result<Ctx> {
    let raw = std::fs::read(&common.config)
        .map_err(|e| anyhow::anyhow!("cannot read {}: {e}", common.config.display()))?;
    let mut config: RunConfig = serde_json::from_slice(&raw)
        .map_err(|e| anyhow::anyhow!("{}: {e}", common.config.display()))?;
    if let Some(d) = common.degree {
        config.degree = d;
    }
    if let Some(g) = common.grad {
        config.grad = Some(g);
    }
    if let Some(t) = common.tol {
        config.tol = t;
    }
    if let Some(s) = common.seed {
        config.seed = s;
    }
    Ok(Ctx {
        config,
        out_dir: common.out.clone(),
    })
}

fn init_threads(common: &CommonArgs) {
    if let Some(n) = common.threads {
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global();
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (common, run): (&CommonArgs, Box<dyn FnOnce(&Ctx) -> anyhow::Result<i32>>) =
        match &cli.command {
            Command::Solve { common } => (common, Box::new(commands::cmd_solve)),
            Command::Optimize {
                common,
                iters,
                eval_path,
            } => {
                let iters = *iters;
                let eval_path = eval_path.clone();
                (
                    common,
                    Box::new(move |ctx| {
                        commands::cmd_optimize(ctx, iters, eval_path.as_deref())
                    }),
                )
            }
            Command::Gradcheck { common } => (common, Box::new(commands::cmd_gradcheck)),
            Command::Benchmark { common } => (common, Box::new(commands::cmd_benchmark)),
            Command::Export { common } => (common, Box::new(commands::cmd_export)),
        };
    init_threads(common);
    let ctx = match load_ctx(common) {
        Ok(ctx) => ctx,
        Err(e) => {
            eprintln!("configuration error: {e:#}");
            return ExitCode::from(EXIT_CONFIG as u8);
        }
    };
    match run(&ctx) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            // configuration and validation problems surface here
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_CONFIG as u8)
        }
    }
}
