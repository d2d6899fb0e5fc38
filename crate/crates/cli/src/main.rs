use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use splatpower::commands::{self, Run};
use splatpower::config::RunConfig;
use splatpower::{Error, ErrorClass};

#[derive(Parser)]
#[command(name = "splatpower", version, about = "Display and rendering power co-optimization for Gaussian-splat scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render every pose to PNG with per-frame power.
    Render(RunArgs),
    /// Report display and rendering power of the scene.
    Power(RunArgs),
    /// Sample iso-quality models across pruning ratios.
    SampleCurve(RunArgs),
    /// Fit the iso-quality curve to earlier samples and locate the optimum.
    Fit(RunArgs),
    /// Build the power-optimal model for each quality target.
    Optimize(RunArgs),
    /// Build foveated multi-region models.
    Foveate(RunArgs),
    /// Consolidate a run directory into one CSV and a scatter plot.
    Report {
        /// Run directory written by earlier commands.
        run_dir: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    /// Reuse checkpoints from an interrupted run with the same configuration.
    #[arg(long)]
    resume: bool,
}

impl RunArgs {
    fn run(&self) -> splatpower::Result<Run> {
        let mut config = RunConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        Run::new(config, self.out.clone(), self.threads, self.resume)
    }
}

fn execute(command: Command) -> splatpower::Result<()> {
    match command {
        Command::Render(a) => {
            let run = a.run()?;
            let r = commands::cmd_render(&run)?;
            info!("rendered {} frames, total {:.6} W", r.images.len(), r.power.total_watts);
            println!("{}", run.out.join("render").display());
        }
        Command::Power(a) => {
            let run = a.run()?;
            let r = commands::cmd_power(&run)?;
            println!(
                "display {:.6} W  rendering {:.6} W  total {:.6} W",
                r.power.display_watts, r.power.rendering_watts, r.power.total_watts
            );
        }
        Command::SampleCurve(a) => {
            let run = a.run()?;
            let r = commands::cmd_sample_curve(&run)?;
            for v in &r.variants {
                println!("{}: {} samples", v.variant.name, v.samples.len());
            }
        }
        Command::Fit(a) => {
            let run = a.run()?;
            for v in commands::cmd_fit(&run)?.variants {
                println!(
                    "{}: rho* {:.4}  total {:.6} W  MRE display {:.4} rendering {:.4}",
                    v.variant.name, v.fit.optimum.rho_star, v.fit.optimum.total_watts, v.fit.diagnostics.display_mre,
                    v.fit.diagnostics.rendering_mre
                );
            }
        }
        Command::Optimize(a) => {
            let run = a.run()?;
            let r = commands::cmd_optimize(&run)?;
            print_summary(&r);
        }
        Command::Foveate(a) => {
            let run = a.run()?;
            let r = commands::cmd_foveate(&run)?;
            print_summary(&r);
        }
        Command::Report { run_dir } => {
            let rows = commands::cmd_report(&run_dir)?;
            println!("{} rows, {} on the Pareto front", rows.len(), rows.iter().filter(|r| r.pareto).count());
        }
    }
    Ok(())
}

fn print_summary(r: &commands::RunReport) {
    let mut rows = vec![r.dense.clone()];
    rows.extend(r.summary.iter().cloned());
    print!("{}", commands::format_summary(&rows));
}

fn exit_code(e: &Error) -> u8 {
    match e.class() {
        ErrorClass::Config => 2,
        ErrorClass::Compute => 3,
        ErrorClass::Io => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
