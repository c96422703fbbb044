use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crocodile::data::SyntheticSpec;
use crocodile::harness::{AblationGrid, SweepSpec};
use crocodile::RunConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

/// A fully resolved command: everything needed to redo it without flags,
/// config files or environment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Job {
    GenData {
        spec: SyntheticSpec,
    },
    Train {
        data: PathBuf,
        run: RunConfig,
        ref_checkpoint: Option<PathBuf>,
    },
    Diagnose {
        checkpoint: PathBuf,
        data: PathBuf,
        ref_checkpoint: Option<PathBuf>,
    },
    Ablate {
        data: PathBuf,
        grid: AblationGrid,
    },
    Sweep {
        data: PathBuf,
        sweep: SweepSpec,
    },
}

impl Job {
    pub fn seeds(&self) -> Vec<u64> {
        match self {
            Job::GenData { spec } => vec![spec.seed],
            Job::Train { run, .. } => vec![run.train.seed],
            Job::Diagnose { .. } => Vec::new(),
            Job::Ablate { grid, .. } => grid.seeds.clone(),
            Job::Sweep { sweep, .. } => sweep.seeds.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub job: Job,
    pub seeds: Vec<u64>,
    pub inputs: Vec<InputDigest>,
    pub out_dir: PathBuf,
    /// File names under `out_dir`.
    pub outputs: Vec<String>,
}

impl Manifest {
    pub fn new(job: Job, inputs: &[PathBuf], out_dir: &Path, outputs: Vec<String>) -> Result<Self> {
        let inputs = inputs
            .iter()
            .map(|p| Ok(InputDigest { path: p.clone(), sha256: file_digest(p)? }))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seeds: job.seeds(),
            job,
            inputs,
            out_dir: out_dir.to_path_buf(),
            outputs,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)? + "\n";
        fs::write(dir.join(MANIFEST_FILE), text).context("writing manifest")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
    }

    /// Fails when any recorded input changed since the manifest was written.
    pub fn check_inputs(&self) -> Result<()> {
        for input in &self.inputs {
            let now = file_digest(&input.path)?;
            if now != input.sha256 {
                bail!("input {} changed since the manifest was written", input.path.display());
            }
        }
        Ok(())
    }
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}
