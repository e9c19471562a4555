use std::path::PathBuf;
use std::process::ExitCode;

use aid_cli::eval::cmd_eval;
use aid_cli::plot::cmd_plot;
use aid_cli::sweep::cmd_sweep;
use aid_cli::train::cmd_train;
use aid_cli::verify::cmd_verify;
use aid_cli::{load_config, RunPaths};
use anyhow::Result;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "aid", about = "Amortized inpainting guidance on analytic diffusion backbones")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides paths.out).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Checkpoint file (overrides paths.checkpoint).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Training seed (overrides train.seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for eval and sweep.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Train a guidance module and write checkpoint, manifest and log.
    Train(Common),
    /// Evaluate the checkpoint and all baselines on the task set.
    Eval(Common),
    /// Run the oracle checks; exits nonzero if any fails.
    Verify(Common),
    /// Half and double each of beta, lambda, alpha_vis, alpha_hole.
    Sweep(Common),
    /// Render a results CSV as a PSNR-vs-NFE SVG.
    Plot {
        #[command(flatten)]
        common: Common,
        /// Results CSV from `eval`.
        results: PathBuf,
    },
}

fn run(cli: Cli) -> Result<bool> {
    let (common, results) = match &cli.command {
        Command::Train(c) | Command::Eval(c) | Command::Verify(c) | Command::Sweep(c) => (c, None),
        Command::Plot { common, results } => (common, Some(results)),
    };
    let cfg = load_config(&common.config, common.seed)?;
    let paths = RunPaths::resolve(&cfg, common.out.as_deref(), common.checkpoint.as_deref());
    match cli.command {
        Command::Train(_) => {
            let out = cmd_train(&cfg, &paths)?;
            println!("trained {} iterations, config {}", out.log.len(), out.config_hash);
            println!("checkpoint {}", paths.checkpoint.display());
        }
        Command::Eval(_) => {
            let out = cmd_eval(&cfg, &paths, common.jobs)?;
            for r in &out.summary {
                println!(
                    "{:<12} {:<9} K={:<3} nfe={:<3} mse {:.4e} ± {:.2e}  psnr {:.2} ± {:.2}",
                    r.method, r.mask_family, r.k, r.nfe, r.mse_mean, r.mse_std, r.psnr_mean, r.psnr_std
                );
            }
            println!("actor parameters {} (overhead ratio {:.4})", out.actor_params, out.overhead_ratio);
        }
        Command::Verify(_) => {
            let report = cmd_verify(&cfg, &paths)?;
            for c in &report.checks {
                println!("{}", c.line());
            }
            if !report.passed() {
                eprintln!("failing checks: {}", report.failing().join(", "));
                return Ok(false);
            }
        }
        Command::Sweep(_) => {
            for r in cmd_sweep(&cfg, &paths, common.jobs)? {
                let verdict = r.passed.map_or("", |p| if p { " pass" } else { " fail" });
                println!("{:<18} {} = {:.4e}{verdict}", r.label, r.metric, r.value);
            }
        }
        Command::Plot { .. } => {
            let path = cmd_plot(results.expect("plot has a results path"), &paths.out)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
