use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use otseg_core::config::{load_shift, GenerateSpec, RunConfig};
use otseg_core::data::write_dataset;
use otseg_core::ot::{read_matrix_csv, write_matrix_csv, CostMatrix, SinkhornConfig};
use otseg_core::train::{evaluate, export_coupling, minibatch_coupling, train};
use otseg_core::Error;

#[derive(Parser)]
#[command(name = "otseg", version, about = "Optimal-transport domain adaptation for segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Generate {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Domain shift file; shifted sets are written without labels.
        #[arg(long)]
        shift: Option<PathBuf>,
        /// Also write labels for a shifted set (for evaluation only).
        #[arg(long)]
        with_labels: bool,
    },
    /// Train a model from a run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Evaluate a checkpoint on a labeled dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve entropic OT with uniform marginals for a cost matrix CSV.
    Sinkhorn {
        #[arg(long)]
        cost: PathBuf,
        #[arg(long)]
        lambda: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a minibatch coupling and its attention report.
    ExportCoupling {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numerical(_) => 3,
        Error::Config(_) => 1,
        _ => 2,
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Generate {
            spec,
            out,
            shift,
            with_labels,
        } => {
            let g = GenerateSpec::load(&spec)?;
            let shift = shift.as_deref().map(load_shift).transpose()?;
            let labeled = shift.is_none() || with_labels;
            write_dataset(&out, &g.scene, g.count, shift.as_ref(), labeled)?;
            info!("wrote {} scenes to {}", g.count, out.display());
        }
        Command::Train { config } => {
            let cfg = RunConfig::load(&config)?;
            let outcome = train(&cfg)?;
            if let Some(m) = outcome.final_miou() {
                println!("final mIoU {m:.4}");
            }
        }
        Command::Eval { checkpoint, data, out } => {
            let csv = evaluate(&checkpoint, &data)?;
            std::fs::write(&out, csv).map_err(|e| Error::Io { path: out.clone(), source: e })?;
        }
        Command::Sinkhorn { cost, lambda, out } => {
            let c = CostMatrix::new(read_matrix_csv(&cost)?).map_err(|e| Error::Data { path: cost.clone(), message: e.to_string() })?;
            let config = SinkhornConfig::with_lambda(lambda).map_err(|e| Error::Config(e.to_string()))?;
            let plan = minibatch_coupling(&c, &config)?;
            if !plan.converged {
                return Err(Error::Numerical(format!(
                    "sinkhorn did not converge in {} iterations",
                    plan.iterations_used
                )));
            }
            write_matrix_csv(&out, &plan.coupling)?;
            println!("transport cost {:.16e}", plan.transport_cost);
        }
        Command::ExportCoupling { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let export = export_coupling(&cfg, &out)?;
            print!("{}", export.report());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
