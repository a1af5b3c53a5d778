use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pfm_lab::pipeline::Direction;
use pfm_lab::{compare, ExperimentConfig, LabError};

#[derive(Parser)]
#[command(name = "pfm", version, about = "Preconditioned flow matching experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config.
    Run {
        config: PathBuf,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Comma-separated seeds replacing the config's list.
        #[arg(long, value_delimiter = ',')]
        seed_override: Option<Vec<u64>>,
        #[arg(long)]
        quiet: bool,
    },
    /// Tabulate metric summaries of completed runs as CSV on stdout.
    Compare {
        #[arg(required = true)]
        manifests: Vec<PathBuf>,
        #[arg(long, default_value = "sliced_w2")]
        metric: String,
        /// Keep one direction only: z_to_x1 or x1_to_z.
        #[arg(long, value_parser = parse_direction)]
        direction: Option<Direction>,
    },
    /// Check a config without running it.
    Validate { config: PathBuf },
}

fn parse_direction(s: &str) -> Result<Direction, String> {
    Direction::parse(s).ok_or_else(|| format!("unknown direction {s:?}; expected z_to_x1 or x1_to_z"))
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), LabError> {
    match cli.command {
        Command::Run {
            config,
            output_dir,
            seed_override,
            quiet,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(dir) = output_dir {
                cfg.output_dir = dir;
            }
            if let Some(seeds) = seed_override {
                cfg.seeds = seeds;
            }
            let report = pfm_lab::run(&cfg, quiet)?;
            println!("{}", report.output_dir.join(pfm_lab::MANIFEST_NAME).display());
        }
        Command::Compare {
            manifests,
            metric,
            direction,
        } => {
            let table = compare::compare(&manifests, &metric, direction)?;
            print!("{}", String::from_utf8(table.to_csv()).expect("csv is utf-8"));
        }
        Command::Validate { config } => {
            let plan = ExperimentConfig::load(&config)?.validate()?;
            let methods: Vec<String> = plan.methods.iter().map(|m| m.label()).collect();
            println!(
                "ok: {} in {} dimension(s), {} seed(s), methods [{}]",
                plan.config.experiment.name(),
                plan.dim,
                plan.config.seeds.len(),
                methods.join(", ")
            );
        }
    }
    Ok(())
}
