use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vfgnn::harness::{self, ExperimentConfig, GridSpec, Mode};
use vfgnn::Error;

/// Vertical federated GNN simulator: training, label-inference attacks,
/// defenses, and experiment sweeps.
#[derive(Parser)]
#[command(name = "vfgnn", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a JSON config.
    Run {
        /// Experiment config file.
        #[arg(long)]
        config: PathBuf,
        /// Output directory for series/report/trace files.
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Override the config's mode.
        #[arg(long, value_parser = parse_mode)]
        mode: Option<Mode>,
        /// Override the config's trace path.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Expand a grid file and run every row, emitting results.csv.
    Sweep {
        /// Grid file: {"base": <config>, "axes": {field: [values, ...]}}.
        #[arg(long)]
        grid: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Parallel workers.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Estimate the number of classes from an embeddings CSV.
    EstimateClasses {
        /// CSV of embeddings, one comma-separated row per node.
        #[arg(long)]
        trace_embeddings: PathBuf,
        /// Clustering seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_mode(s: &str) -> Result<Mode, String> {
    match s {
        "online" => Ok(Mode::Online),
        "offline" => Ok(Mode::Offline),
        other => Err(format!("unknown mode {other:?} (expected online|offline)")),
    }
}

fn main() -> ExitCode {
    match real_main() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn real_main() -> Result<(), Error> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            out,
            mode,
            trace,
        } => {
            let text = std::fs::read_to_string(&config)?;
            let mut cfg: ExperimentConfig = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", config.display())))?;
            if let Some(m) = mode {
                cfg.mode = m;
            }
            if let Some(t) = trace {
                cfg.trace = Some(t);
            }
            let row = harness::run(&cfg, &out)?;
            println!("{}", serde_json::to_string_pretty(&row)?);
            Ok(())
        }
        Command::Sweep { grid, out, jobs } => {
            let text = std::fs::read_to_string(&grid)?;
            let spec: GridSpec = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", grid.display())))?;
            let configs = harness::expand_grid(&spec)?;
            eprintln!("sweep: {} configs, {} jobs", configs.len(), jobs);
            let rows = harness::sweep(&configs, &out, jobs)?;
            eprintln!("wrote {} rows to {}", rows.len(), out.join("results.csv").display());
            Ok(())
        }
        Command::EstimateClasses {
            trace_embeddings,
            seed,
        } => {
            let emb = harness::read_embeddings_csv(&trace_embeddings)?;
            let k = vfgnn::attack::estimate_num_classes(&emb, seed)?;
            println!("{k}");
            Ok(())
        }
    }
}
