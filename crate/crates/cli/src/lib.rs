//! Batch experiment driver: parses a configuration, runs one experiment and
//! writes `results.csv`, `manifest.txt` and any experiment artifacts.
//!
//! Exit status: 0 when every check passes, 1 when a check fails, 2 for an
//! invalid configuration or command line, 3 for I/O failures.

pub mod config;
pub mod experiments;
pub mod report;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::Parser;

use config::{ConfigFileError, ExperimentConfig};
use experiments::{run_experiment, Artifact, Progress};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_IO: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "ssnll", version, about = "Run one uncertainty-estimation experiment from a configuration file")]
pub struct Cli {
    /// Experiment configuration (key = value lines).
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Overrides the configuration seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; overrides `out` in the configuration.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Suppress progress and summary output.
    #[arg(long)]
    pub quiet: bool,
    /// Worker threads. Results do not depend on this.
    #[arg(long, value_parser = clap::value_parser!(u16).range(1..))]
    pub jobs: Option<u16>,
}

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Io(String),
}

impl RunError {
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Invalid(_) => EXIT_INVALID,
            RunError::Io(_) => EXIT_IO,
        }
    }
}

impl From<ConfigFileError> for RunError {
    fn from(e: ConfigFileError) -> Self {
        match e {
            ConfigFileError::Io(..) => RunError::Io(e.to_string()),
            ConfigFileError::Invalid(e) => RunError::Invalid(e.to_string()),
        }
    }
}

impl From<ssnll::Error> for RunError {
    fn from(e: ssnll::Error) -> Self {
        match e {
            ssnll::Error::Io(_) | ssnll::Error::Format { .. } => RunError::Io(e.to_string()),
            _ => RunError::Invalid(e.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> RunError + '_ {
    move |e| RunError::Io(format!("{}: {e}", path.display()))
}

/// Runs the command line and returns the exit status.
pub fn run(cli: &Cli) -> Result<i32, RunError> {
    let mut cfg = ExperimentConfig::from_file(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| RunError::Invalid("no output directory: set `out` in the configuration or pass --out".into()))?;
    std::fs::create_dir_all(&out).map_err(io_err(&out))?;

    let progress = Progress { quiet: cli.quiet };
    let outcome = match cli.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n as usize)
            .build()
            .map_err(|e| RunError::Invalid(format!("cannot start {n} workers: {e}")))?
            .install(|| run_experiment(&cfg, progress)),
        None => run_experiment(&cfg, progress),
    }?;

    let hash = cfg.hash();
    let results = out.join("results.csv");
    report::write_results(&results, &hash, &outcome.rows).map_err(io_err(&results))?;
    for artifact in &outcome.artifacts {
        write_artifact(&out, &hash, artifact)?;
    }
    let manifest = out.join("manifest.txt");
    std::fs::write(&manifest, manifest_text(&cfg)).map_err(io_err(&manifest))?;

    let failed: Vec<_> = outcome.rows.iter().filter(|r| r.pass() == Some(false)).collect();
    if !cli.quiet {
        let checks = outcome.rows.iter().filter(|r| r.pass().is_some()).count();
        for r in &failed {
            println!("FAIL {} {} {}: {:e} (tolerance {:e})", r.instance, r.scope, r.metric, r.value, r.tolerance().unwrap_or(f64::NAN));
        }
        println!("{}: {} of {} checks passed; results in {}", cfg.experiment.name(), checks - failed.len(), checks, out.display());
    }
    Ok(if failed.is_empty() { EXIT_OK } else { EXIT_CHECK_FAILED })
}

fn write_artifact(out: &Path, hash: &str, artifact: &Artifact) -> Result<(), RunError> {
    match artifact {
        Artifact::Table { name, header, records } => {
            let path = out.join(name);
            let mut head = vec!["config_hash"];
            head.extend(header.iter().map(String::as_str));
            let rows = records.iter().map(|r| std::iter::once(hash.to_string()).chain(r.iter().cloned()));
            report::write_csv(&path, &head, rows).map_err(io_err(&path))
        }
        Artifact::Raster { name, image } => Ok(ssnll::grid::raster::write_raster(&out.join(name), image)?),
        Artifact::Affine { name, estimator } => {
            Ok(ssnll::optim::write_affine(&out.join(name), estimator, &[("config_hash".into(), hash.into())])?)
        }
    }
}

/// `key=value` lines: tool version, configuration hash and the effective
/// configuration.
pub fn manifest_text(cfg: &ExperimentConfig) -> String {
    let mut s = String::new();
    writeln!(s, "tool_version={}", env!("CARGO_PKG_VERSION")).unwrap();
    writeln!(s, "config_hash={}", cfg.hash()).unwrap();
    s.push_str(&cfg.canonical());
    s
}
