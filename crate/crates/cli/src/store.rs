//! On-disk campaign state: manifest, sampler state, trace CSVs and a lock.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use bode_core::sdoe::trace::{write_raw_qoi, write_trace};
use bode_core::sdoe::CampaignState;
use serde::{Deserialize, Serialize};

use crate::config::Resolved;
use crate::error::CliError;

pub const MANIFEST: &str = "manifest.json";
pub const STATE: &str = "state.json";
pub const TRACE: &str = "trace.csv";
pub const RAW_TRACE: &str = "trace_raw.csv";
const LOCK: &str = ".lock";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Running,
    Done,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub seed: u64,
    pub status: Status,
    pub config: Resolved,
    pub state_file: String,
    pub trace_file: String,
    pub raw_trace_file: String,
    pub iterations: usize,
    pub observations: usize,
}

impl Manifest {
    pub fn new(config: Resolved) -> Self {
        Manifest {
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.campaign.seed,
            status: Status::Running,
            config,
            state_file: STATE.into(),
            trace_file: TRACE.into(),
            raw_trace_file: RAW_TRACE.into(),
            iterations: 0,
            observations: 0,
        }
    }
}

/// Exclusive hold on a state directory; released on drop.
pub struct Lock(PathBuf);

impl Lock {
    pub fn acquire(dir: &Path) -> Result<Lock, CliError> {
        let path = dir.join(LOCK);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Lock(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Usage(format!(
                "{} is locked by another invocation (remove {} if it is stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

pub struct StateDir {
    root: PathBuf,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

impl StateDir {
    pub fn new(root: &Path) -> Self {
        StateDir { root: root.to_path_buf() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn exists(&self) -> bool {
        self.root.join(MANIFEST).exists()
    }

    pub fn create(&self) -> Result<(), CliError> {
        fs::create_dir_all(&self.root)?;
        Ok(())
    }

    pub fn load(&self) -> Result<(Manifest, Option<CampaignState>), CliError> {
        let path = self.root.join(MANIFEST);
        let text = fs::read_to_string(&path)
            .map_err(|_| CliError::Usage(format!("{} holds no campaign (missing {MANIFEST})", self.root.display())))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        let state_path = self.root.join(&manifest.state_file);
        let state = if state_path.exists() {
            Some(serde_json::from_str(&fs::read_to_string(state_path)?)?)
        } else {
            None
        };
        Ok((manifest, state))
    }

    pub fn save_manifest(&self, m: &Manifest) -> Result<(), CliError> {
        write_atomic(&self.root.join(MANIFEST), serde_json::to_string_pretty(m)?.as_bytes())
    }

    /// Persists the state first, then regenerates the trace files from it,
    /// then the manifest; the state file is the source of truth on resume.
    pub fn save(&self, m: &mut Manifest, state: &CampaignState) -> Result<(), CliError> {
        write_atomic(&self.root.join(&m.state_file), serde_json::to_string(state)?.as_bytes())?;
        let d = state.data.designs().first().map_or(m.config.space.dim(), Vec::len);
        let mut buf = Vec::new();
        write_trace(&mut buf, d, &state.trace.records)?;
        write_atomic(&self.root.join(&m.trace_file), &buf)?;
        let mut buf = Vec::new();
        write_raw_qoi(&mut buf, &state.trace.records, &state.trace.raw_qoi)?;
        write_atomic(&self.root.join(&m.raw_trace_file), &buf)?;
        m.iterations = state.iteration;
        m.observations = state.data.len();
        self.save_manifest(m)
    }
}
