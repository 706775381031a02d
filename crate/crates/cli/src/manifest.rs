use std::fs::File;
use std::io::{self, BufReader};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::fail::{mismatch, Classify, Result};

pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

impl FileDigest {
    pub fn of(path: &Path) -> Result<Self> {
        Ok(Self {
            path: path.to_path_buf(),
            sha256: sha256_file(path)?,
        })
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let f = File::open(path).io(format!("opening {}", path.display()))?;
    let mut h = Sha256::new();
    io::copy(&mut BufReader::new(f), &mut h).io(format!("hashing {}", path.display()))?;
    Ok(format!("{:x}", h.finalize()))
}

/// Provenance of one command invocation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seeds: serde_json::Value,
    pub code_version: String,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub started_unix: u64,
    pub wall_clock_seconds: f64,
}

pub struct ManifestBuilder {
    command: String,
    config: serde_json::Value,
    seeds: serde_json::Value,
    inputs: Vec<FileDigest>,
    started_unix: u64,
    clock: Instant,
}

impl ManifestBuilder {
    pub fn start(command: &str, config: &impl Serialize, seeds: serde_json::Value) -> Self {
        Self {
            command: command.to_string(),
            config: serde_json::to_value(config).expect("config serializes"),
            seeds,
            inputs: Vec::new(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            clock: Instant::now(),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(FileDigest::of(path)?);
        Ok(())
    }

    /// Digest `outputs` and write the manifest to `dest` atomically.
    pub fn finish(self, outputs: &[PathBuf], dest: &Path) -> Result<RunManifest> {
        let m = RunManifest {
            command: self.command,
            config: self.config,
            seeds: self.seeds,
            code_version: CODE_VERSION.to_string(),
            inputs: self.inputs,
            outputs: outputs.iter().map(|p| FileDigest::of(p)).collect::<Result<_>>()?,
            started_unix: self.started_unix,
            wall_clock_seconds: self.clock.elapsed().as_secs_f64(),
        };
        let text = serde_json::to_vec_pretty(&m).expect("manifest serializes");
        ilts_core::io::write_atomic(dest, &text).io(format!("writing {}", dest.display()))?;
        Ok(m)
    }
}

/// `<file>.manifest.json`.
pub fn manifest_path(output: &Path) -> PathBuf {
    let mut s = output.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

/// Recompute every digest in the manifest at `path`.
pub fn verify(path: &Path) -> Result<RunManifest> {
    let text = std::fs::read(path).io(format!("reading {}", path.display()))?;
    let m: RunManifest = serde_json::from_slice(&text).io(format!("parsing {}", path.display()))?;
    for d in m.inputs.iter().chain(&m.outputs) {
        let now = sha256_file(&d.path)?;
        if now != d.sha256 {
            return Err(mismatch(format!("{} changed since the manifest was written", d.path.display())));
        }
    }
    Ok(m)
}
