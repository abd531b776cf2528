//! Subcommand entry points shared by main and the integration tests.

use std::path::{Path, PathBuf};

use fedsim_core::{Error, Result};

use crate::config::load_config;
use crate::metrics::{read_metrics, write_plot_csv};
use crate::runner::{run_experiment, write_partition_manifests, RunOutputs, RunSummary};

/// Directory override for run artifacts; falls back to the working directory.
pub const OUT_DIR_ENV: &str = "FEDSIM_OUT_DIR";

/// Derives artifact paths from the config file name: x.toml becomes
/// x.metrics.jsonl, x.model.bin, x.personalization.json.
pub fn output_paths(config_path: &Path, out_dir: Option<&Path>) -> Result<RunOutputs> {
    let stem = config_path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Config(format!("config path {} has no file name", config_path.display())))?;
    let dir = match out_dir {
        Some(d) => d.to_path_buf(),
        None => match std::env::var_os(OUT_DIR_ENV) {
            Some(d) => PathBuf::from(d),
            None => PathBuf::from("."),
        },
    };
    Ok(RunOutputs {
        metrics: dir.join(format!("{stem}.metrics.jsonl")),
        model: dir.join(format!("{stem}.model.bin")),
        personalization: dir.join(format!("{stem}.personalization.json")),
    })
}

pub fn cmd_run(
    config_path: &Path,
    seed: Option<u64>,
    workers: Option<usize>,
    out_dir: Option<&Path>,
) -> Result<(RunOutputs, RunSummary)> {
    let mut exp = load_config(config_path)?;
    if let Some(s) = seed {
        exp.seed = s;
    }
    if let Some(w) = workers {
        if w == 0 {
            return Err(Error::Config("--workers must be at least 1".into()));
        }
        exp.workers = w;
    }
    let outputs = output_paths(config_path, out_dir)?;
    let summary = run_experiment(&exp, &outputs)?;
    Ok((outputs, summary))
}

pub fn cmd_partition(config_path: &Path, out_path: &Path) -> Result<usize> {
    let exp = load_config(config_path)?;
    write_partition_manifests(&exp, out_path)
}

pub fn cmd_plotdata(metrics_path: &Path, out_csv: &Path) -> Result<usize> {
    let records = read_metrics(metrics_path)?;
    write_plot_csv(&records, out_csv)
}

/// Process exit code per error family: bad input 2, runtime failure 3, io 4.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Infeasible(_) | Error::Shape { .. } | Error::Domain(_) => 2,
        Error::Divergence { .. } | Error::Protocol(_) | Error::Aggregation(_) => 3,
        Error::Io(_) | Error::Format { .. } => 4,
    }
}
