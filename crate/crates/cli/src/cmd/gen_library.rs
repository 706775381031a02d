use std::path::PathBuf;

use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::json;

use ilts_core::datagen::build_library;
use ilts_core::dynsys::Family;

use super::required;
use crate::config::merge;
use crate::fail::{usage, Classify, Result};
use crate::manifest::{manifest_path, sha256_file, ManifestBuilder};

#[derive(Args, Debug, Serialize)]
pub struct Flags {
    /// orthogonal | identity
    #[arg(long)]
    family: Option<String>,
    #[arg(long)]
    systems: Option<usize>,
    /// Initial states per system.
    #[arg(long)]
    inits: Option<usize>,
    /// States per sequence.
    #[arg(long)]
    length: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub family: String,
    pub systems: usize,
    pub inits: usize,
    pub length: usize,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            family: "orthogonal".into(),
            systems: 40_000,
            inits: 1,
            length: 251,
            seed: 0,
            out: None,
        }
    }
}

pub fn run(flags: &Flags, config: Option<&std::path::Path>) -> Result<()> {
    let s: Settings = merge("gen-library", config, flags)?;
    let out = required(&s.out, "out")?;
    let family: Family = s.family.parse().map_err(usage)?;
    if s.systems == 0 || s.inits == 0 || s.length == 0 {
        return Err(usage("--systems, --inits and --length must be positive"));
    }
    let manifest = ManifestBuilder::start("gen-library", &s, json!({ "library": s.seed }));
    let lib = build_library(s.systems, s.inits, s.length, family, s.seed);
    ilts_core::io::write_library(&out, &lib).io(format!("writing {}", out.display()))?;
    manifest.finish(std::slice::from_ref(&out), &manifest_path(&out))?;

    let n = lib.n_sequences() as f64;
    let mean_sq: f64 = (0..lib.n_systems())
        .flat_map(|sys| (0..lib.n_inits()).map(move |i| (sys, i)))
        .map(|(sys, i)| lib.initial_state(sys, i).iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        / n;
    let bytes = std::fs::metadata(&out).io("stat library")?.len();
    println!("library     {}", out.display());
    println!("family      {family}");
    println!("sequences   {} ({} systems × {} inits)", lib.n_sequences(), s.systems, s.inits);
    println!("length      {}", s.length);
    println!("mean |x0|^2 {mean_sq:.4}");
    println!("bytes       {bytes}");
    println!("sha256      {}", sha256_file(&out)?);
    Ok(())
}
