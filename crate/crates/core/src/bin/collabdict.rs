use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use collabdict::harness::{
    audit_checkpoint, export_run, run_experiment, write_dataset_dir, ExperimentConfig,
    HarnessError, Stage, SyntheticSource,
};
use collabdict::privacy::PrivacyConfig;
use collabdict::topology::Graph;

#[derive(Parser)]
#[command(name = "collabdict", version, about = "Collaborative dictionary learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a JSON config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Generate synthetic participant datasets from a JSON spec.
    Gen {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Privacy report of a GGM checkpoint on a data directory.
    Audit {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 2.0)]
        ell0: f64,
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a communication graph as an edge list.
    Graph {
        #[arg(long, value_enum)]
        kind: GraphArg,
        #[arg(long)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum GraphArg {
    InverseChord,
    Complete,
    Cycle,
    Path,
}

fn io_err(stage: Stage, path: &std::path::Path, e: impl std::fmt::Display) -> HarnessError {
    HarnessError::new(stage, format!("{}: {e}", path.display()))
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Run { config, seed, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let output = run_experiment(&cfg)?;
            export_run(&output, &out)?;
            let r = &output.report;
            match r.auc {
                Some(a) => println!("AUC {a:.4}"),
                None => println!("AUC undefined"),
            }
            for w in &r.warnings {
                eprintln!("warning: {w}");
            }
            println!("report written to {}", out.display());
        }
        Command::Gen { spec, out, seed } => {
            let text = fs::read_to_string(&spec).map_err(|e| io_err(Stage::Config, &spec, e))?;
            let source: SyntheticSource =
                serde_json::from_str(&text).map_err(|e| io_err(Stage::Config, &spec, e))?;
            let resolved = source.resolve(seed)?;
            let data = resolved.generate()?;
            write_dataset_dir(&out, &data.datasets, Some(&data.labels))?;
            let truth = out.join("truth.json");
            let text = serde_json::to_string_pretty(&resolved)
                .map_err(|e| io_err(Stage::Export, &truth, e))?;
            fs::write(&truth, text).map_err(|e| io_err(Stage::Export, &truth, e))?;
            println!("{} participant files written to {}", data.datasets.len(), out.display());
        }
        Command::Audit {
            model,
            data,
            ell0,
            trials,
            seed,
            out,
        } => {
            let cfg = PrivacyConfig {
                ell0,
                audit_trials: trials,
                ..PrivacyConfig::default()
            };
            let report = audit_checkpoint(&model, &data, &cfg, seed)?;
            let text = serde_json::to_string_pretty(&report)
                .map_err(|e| HarnessError::new(Stage::Export, e.to_string()))?;
            match out {
                Some(path) => fs::write(&path, text).map_err(|e| io_err(Stage::Export, &path, e))?,
                None => println!("{text}"),
            }
        }
        Command::Graph { kind, size, out } => {
            let g = match kind {
                GraphArg::InverseChord => Graph::cycle_inverse_chord(size),
                GraphArg::Complete => Graph::complete(size),
                GraphArg::Cycle => Graph::cycle(size),
                GraphArg::Path => Graph::path(size),
            }
            .map_err(|e| HarnessError::new(Stage::Graph, e.to_string()))?;
            fs::write(&out, g.to_edge_list()).map_err(|e| io_err(Stage::Export, &out, e))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
