//! Front-end for `fssl-lab`: run experiments, compare runs, check gradients.

pub mod report;

use std::io;
use std::path::{Path, PathBuf};

use fssl_core::config::ExperimentConfig;
use fssl_core::experiment::{run_experiment, write_artifacts, RunOutput};
use fssl_core::gradcheck::{run_all, CheckReport};
use fssl_core::FsslError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("cannot read config {path}: {source}")]
    ConfigUnreadable { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Core(#[from] FsslError),
    #[error("{0} gradient check(s) exceeded the tolerance")]
    GradcheckFailed(usize),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::ConfigUnreadable { .. } | CliError::Core(FsslError::ConfigInvalid { .. }) => {
                2
            }
            _ => 1,
        }
    }
}

pub fn load_config(
    path: &Path,
    overrides: &[String],
    seed: Option<u64>,
) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|source| CliError::ConfigUnreadable {
        path: path.to_path_buf(),
        source,
    })?;
    let mut all = overrides.to_vec();
    if let Some(s) = seed {
        all.push(format!("seed={s}"));
    }
    Ok(ExperimentConfig::from_toml_with_overrides(&text, &all)?)
}

/// `runs/<local timestamp>-seed<seed>`.
pub fn default_out_dir(seed: u64) -> PathBuf {
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    PathBuf::from("runs").join(format!("{stamp}-seed{seed}"))
}

pub fn cmd_run(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutput, CliError> {
    log::info!(
        "running `{}` with seed {} into {}",
        cfg.name,
        cfg.seed,
        out.display()
    );
    let run = run_experiment(cfg)?;
    write_artifacts(out, &run)?;
    Ok(run)
}

/// Prints the table and writes plots; `out` defaults to the first input.
pub fn cmd_report(
    inputs: &[PathBuf],
    out: Option<&Path>,
) -> Result<(String, Vec<PathBuf>), CliError> {
    let runs = report::discover(inputs)?;
    let out = out.map_or_else(|| inputs[0].clone(), Path::to_path_buf);
    let files = report::write_report(&runs, &out)?;
    Ok((report::render_table(&report::table(&runs)), files))
}

pub fn render_gradcheck(reports: &[CheckReport]) -> String {
    let mut s = String::new();
    for r in reports {
        s.push_str(&format!(
            "{:<18} instances {:>4}  max_rel_err {:.3e}  {}\n",
            r.name,
            r.instances,
            r.max_rel_err,
            if r.passed { "PASS" } else { "FAIL" }
        ));
    }
    s
}

pub fn gradcheck_verdict(reports: &[CheckReport]) -> Result<(), CliError> {
    match reports.iter().filter(|r| !r.passed).count() {
        0 => Ok(()),
        n => Err(CliError::GradcheckFailed(n)),
    }
}

pub fn cmd_gradcheck(instances: usize, seed: u64) -> Result<Vec<CheckReport>, CliError> {
    Ok(run_all(instances, seed)?)
}
