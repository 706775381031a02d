pub mod eval;
pub mod gen_library;
pub mod ood;
pub mod prune;
pub mod train;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use ilts_core::datagen::TraceLibrary;
use ilts_core::dynsys::Family;
use ilts_core::error::{EvalError, FormatError, ModelError};
use ilts_core::evalsuite::{Aggregation, NeedleConfig};
use ilts_core::model::{load_checkpoint, ModelState};

use crate::fail::{mismatch, usage, Classify, Failure, Result};

/// Written next to checkpoints so later commands can check what a model was
/// trained on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunInfo {
    pub preset: String,
    pub family: Family,
    pub library_sha256: String,
    pub context_len: usize,
}

pub const RUN_INFO: &str = "run.json";

pub fn read_run_info(dir: &Path) -> Result<Option<RunInfo>> {
    let p = dir.join(RUN_INFO);
    if !p.exists() {
        return Ok(None);
    }
    let text = std::fs::read(&p).io(format!("reading {}", p.display()))?;
    serde_json::from_slice(&text).io(format!("parsing {}", p.display())).map(Some)
}

pub fn required(p: &Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    p.clone().ok_or_else(|| usage(format!("--{flag} is required")))
}

pub fn format_failure(e: FormatError, path: &Path) -> Failure {
    Failure::Io(anyhow::Error::new(e).context(format!("reading {}", path.display())))
}

pub fn load_library(path: &Path) -> Result<TraceLibrary> {
    ilts_core::io::read_library(path).map_err(|e| format_failure(e, path))
}

pub fn load_model(path: &Path) -> Result<ModelState> {
    load_checkpoint(path).map_err(|e| match e {
        ModelError::Io(_) | ModelError::CorruptFile(_) => {
            Failure::Io(anyhow::Error::new(e).context(format!("reading {}", path.display())))
        }
        other => Failure::Mismatch(anyhow::Error::new(other)),
    })
}

/// Reject a library whose family differs from the one the checkpoint was
/// trained on, when that is recorded.
pub fn check_family(checkpoint: &Path, lib: &TraceLibrary) -> Result<()> {
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    if let Some(info) = read_run_info(dir)? {
        if info.family != lib.family {
            return Err(mismatch(format!(
                "checkpoint was trained on the {} family, library is {}",
                info.family, lib.family
            )));
        }
    }
    Ok(())
}

pub fn eval_failure(e: EvalError) -> Failure {
    match e {
        EvalError::InvalidConfig(_) => Failure::Usage(e.into()),
        _ => Failure::Mismatch(e.into()),
    }
}

pub fn parse_aggregation(s: &str) -> Result<Aggregation> {
    match s {
        "median" => Ok(Aggregation::MedianThenQuantile),
        "pooled" => Ok(Aggregation::Pooled),
        other => Err(usage(format!("unknown aggregation {other:?} (median | pooled)"))),
    }
}

/// Needle traces must fit the model's context.
pub fn check_context(cfg: &NeedleConfig, context_len: usize) -> Result<()> {
    let len = (cfg.seg_len + 2) * cfg.n_systems + cfg.seg_len + 2;
    if len > context_len {
        return Err(mismatch(format!(
            "needle traces of {len} tokens exceed the model context of {context_len}"
        )));
    }
    Ok(())
}

pub fn write_records(path: &Path, records: &[ilts_core::evalsuite::MetricsRecord]) -> Result<()> {
    let mut buf = Vec::new();
    ilts_core::evalsuite::write_ndjson(&mut buf, records).io("encoding records")?;
    ilts_core::io::write_atomic(path, &buf).io(format!("writing {}", path.display()))
}

pub fn write_csv(path: &Path, records: &[ilts_core::evalsuite::MetricsRecord]) -> Result<()> {
    let mut buf = Vec::new();
    ilts_core::evalsuite::write_csv(&mut buf, records).io("encoding records")?;
    ilts_core::io::write_atomic(path, &buf).io(format!("writing {}", path.display()))
}
