//! Config-driven experiment runner.
//!
//! A run validates its config, writes every table under `output_dir` and
//! finishes with a `manifest.json` listing what it emitted.

// Index loops over small fixed-size rows read closer to the math.
#![allow(clippy::needless_range_loop)]

pub mod compare;
pub mod config;
pub mod error;
pub mod experiments;
pub mod output;
pub mod pipeline;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use time::format_description::well_known::Rfc3339;
use time::OffsetDateTime;

pub use config::{ExperimentConfig, Plan};
pub use error::{LabError, Result};
pub use experiments::ExperimentResults;

use error::io_err;
use output::OutputDir;

pub const MANIFEST_NAME: &str = "manifest.json";
pub const CONFIG_NAME: &str = "config.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub experiment: String,
    /// SHA-256 of the canonical config JSON.
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub started_at: String,
    pub finished_at: String,
    pub status: RunStatus,
    #[serde(default)]
    pub error: Option<String>,
    /// Paths relative to the output directory, the manifest excluded.
    pub emitted_files: Vec<PathBuf>,
    pub versions: BTreeMap<String, String>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|source| LabError::Json {
            path: path.to_path_buf(),
            source,
        })
    }
}

#[derive(Debug)]
pub struct RunReport {
    pub manifest: Manifest,
    pub results: ExperimentResults,
    pub output_dir: PathBuf,
}

pub fn config_hash(config: &ExperimentConfig) -> String {
    hex::encode(Sha256::digest(config.canonical_json().as_bytes()))
}

fn now() -> String {
    OffsetDateTime::now_utc()
        .format(&Rfc3339)
        .expect("rfc3339 formats any utc time")
}

fn versions() -> BTreeMap<String, String> {
    BTreeMap::from([
        ("pfm_lab".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ("pfm_core".to_string(), pfm_core::VERSION.to_string()),
        (
            "precond_format".to_string(),
            pfm_core::precond::PRECOND_FORMAT_VERSION.to_string(),
        ),
    ])
}

/// Empties a previous run's files. A nonempty directory without a manifest
/// is refused so that unrelated data is never overwritten.
fn prepare_output_dir(dir: &Path) -> Result<()> {
    if !dir.exists() {
        return Ok(());
    }
    let mut entries = std::fs::read_dir(dir).map_err(io_err(dir))?;
    if entries.next().is_none() {
        return Ok(());
    }
    let manifest_path = dir.join(MANIFEST_NAME);
    if !manifest_path.is_file() {
        return Err(LabError::Validation(format!(
            "output_dir {} is not empty and holds no {MANIFEST_NAME}",
            dir.display()
        )));
    }
    let old = Manifest::load(&manifest_path)?;
    for rel in &old.emitted_files {
        let p = dir.join(rel);
        if p.is_file() {
            std::fs::remove_file(&p).map_err(io_err(&p))?;
        }
    }
    std::fs::remove_file(&manifest_path).map_err(io_err(&manifest_path))?;
    Ok(())
}

/// Runs one experiment end to end. Progress goes to stderr unless `quiet`.
pub fn run(config: &ExperimentConfig, quiet: bool) -> Result<RunReport> {
    let plan = config.validate()?;
    let dir = config.output_dir.clone();
    prepare_output_dir(&dir)?;
    let mut out = OutputDir::create(&dir)?;
    let started_at = now();
    out.write_json(CONFIG_NAME, config)?;

    let log = |msg: &str| {
        if !quiet {
            eprintln!("{msg}");
        }
    };
    log(&format!("{}: writing to {}", config.experiment.name(), dir.display()));
    let outcome = experiments::execute(&plan, &mut out, &log);

    let manifest = Manifest {
        experiment: config.experiment.name().to_string(),
        config_hash: config_hash(config),
        seeds: config.seeds.clone(),
        started_at,
        finished_at: now(),
        status: if outcome.is_ok() {
            RunStatus::Complete
        } else {
            RunStatus::Failed
        },
        error: outcome.as_ref().err().map(ToString::to_string),
        emitted_files: out.emitted().to_vec(),
        versions: versions(),
    };
    let manifest_path = dir.join(MANIFEST_NAME);
    let mut bytes = serde_json::to_vec_pretty(&manifest).map_err(|source| LabError::Json {
        path: manifest_path.clone(),
        source,
    })?;
    bytes.push(b'\n');
    std::fs::write(&manifest_path, bytes).map_err(io_err(&manifest_path))?;

    let results = outcome?;
    log(&format!("{}: done", config.experiment.name()));
    Ok(RunReport {
        manifest,
        results,
        output_dir: dir,
    })
}
