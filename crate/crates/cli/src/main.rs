use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fedsim_cli::commands::{cmd_partition, cmd_plotdata, cmd_run, exit_code_for};

#[derive(Parser)]
#[command(name = "fedsim", version, about = "Federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a TOML config.
    Run {
        config: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the worker count (does not change results).
        #[arg(long)]
        workers: Option<usize>,
        /// Directory for output artifacts (default: FEDSIM_OUT_DIR or cwd).
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Write per-client shard manifests as JSON lines without training.
    Partition {
        config: PathBuf,
        /// Output file for the manifests.
        out: PathBuf,
    },
    /// Flatten a metrics log into a plotting-friendly CSV.
    Plotdata {
        metrics: PathBuf,
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { config, seed, workers, out_dir } => {
            cmd_run(config, *seed, *workers, out_dir.as_deref()).map(|(outputs, summary)| {
                println!("metrics: {}", outputs.metrics.display());
                println!("model:   {}", outputs.model.display());
                if summary.personalization.is_some() {
                    println!("personalization: {}", outputs.personalization.display());
                }
                println!("rounds: {}", summary.rounds);
                if let (Some(acc), Some(loss)) = (summary.final_test_accuracy, summary.final_test_loss) {
                    println!("final test accuracy: {acc:.4}  loss: {loss:.6}");
                }
                println!("uplink bytes: {}  bandwidth gain: {:.2}x", summary.total_payload_bytes, summary.bandwidth_gain);
                if summary.epsilon_spent > 0.0 {
                    println!("privacy spent: epsilon = {:.4}", summary.epsilon_spent);
                }
                if let Some(p) = &summary.personalization {
                    println!(
                        "personalized accuracy: {:.4} (global {:.4}, local {:.4}, mean alpha {:.3})",
                        p.mean_interpolated_accuracy,
                        p.mean_global_accuracy,
                        p.mean_local_accuracy,
                        p.mean_alpha
                    );
                }
            })
        }
        Command::Partition { config, out } => cmd_partition(config, out).map(|n| {
            println!("wrote {n} shard manifests to {}", out.display());
        }),
        Command::Plotdata { metrics, out } => cmd_plotdata(metrics, out).map(|n| {
            println!("wrote {n} rows to {}", out.display());
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e) as u8)
        }
    }
}
