use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::json;

use ilts_core::circuits::{
    disentangle, eval_circuit, export_circuit, quantize, train_gates, Circuit, EmbedMode, GateTrainConfig, Task,
    TaskData, DEFAULT_K_SCALE, DEFAULT_SPARSITY,
};
use ilts_core::error::CircuitError;
use ilts_core::evalsuite::build_needle_dataset;

use super::eval::needle_config;
use super::{check_context, check_family, eval_failure, load_library, load_model, required};
use crate::config::merge;
use crate::fail::{usage, Classify, Failure, Result};
use crate::manifest::{manifest_path, ManifestBuilder};

#[derive(Args, Debug, Serialize)]
pub struct Flags {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    library: Option<PathBuf>,
    /// one-after | two-after
    #[arg(long)]
    task: Option<String>,
    /// Weight on the task error.
    #[arg(long)]
    k: Option<f64>,
    #[arg(long)]
    sparsity: Option<f64>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    edge_weight: Option<f64>,
    /// Fraction of the run over which the edge penalty ramps in.
    #[arg(long)]
    anneal: Option<f64>,
    /// Initial states in the task configuration.
    #[arg(long)]
    inits: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    gate_seed: Option<u64>,
    /// single | split
    #[arg(long)]
    embed: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub checkpoint: Option<PathBuf>,
    pub library: Option<PathBuf>,
    pub task: String,
    pub k: f64,
    pub sparsity: f64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub edge_weight: f64,
    pub anneal: f64,
    pub inits: usize,
    pub seed: u64,
    pub gate_seed: u64,
    pub embed: String,
    pub out: Option<PathBuf>,
}

impl Default for Settings {
    fn default() -> Self {
        let g = GateTrainConfig::default();
        Self {
            checkpoint: None,
            library: None,
            task: "one-after".into(),
            k: DEFAULT_K_SCALE,
            sparsity: DEFAULT_SPARSITY,
            steps: g.steps,
            batch: g.batch_size,
            lr: g.learning_rate,
            edge_weight: g.edge_weight,
            anneal: g.anneal,
            inits: 100,
            seed: 0,
            gate_seed: 0,
            embed: "single".into(),
            out: None,
        }
    }
}

fn circuit_failure(e: CircuitError) -> Failure {
    match e {
        CircuitError::UnsupportedArch(_) | CircuitError::GraphMismatch => Failure::Mismatch(e.into()),
        other => Failure::Other(other.into()),
    }
}

pub fn run(flags: &Flags, config: Option<&Path>) -> Result<()> {
    let s: Settings = merge("prune", config, flags)?;
    let ckpt = required(&s.checkpoint, "checkpoint")?;
    let lib_path = required(&s.library, "library")?;
    let out = required(&s.out, "out")?;
    let task: Task = s.task.parse().map_err(usage)?;
    let embed = match s.embed.as_str() {
        "single" => EmbedMode::Single,
        "split" => EmbedMode::Split,
        other => return Err(usage(format!("unknown --embed {other:?}"))),
    };
    if !(0.0..=1.0).contains(&s.sparsity) {
        return Err(usage("--sparsity must lie in [0, 1]"));
    }
    if !(s.k >= 0.0) {
        return Err(usage("--k must be non-negative"));
    }
    let cfg = needle_config(5, 0, 1, s.inits);
    cfg.validate().map_err(eval_failure)?;

    let state = load_model(&ckpt)?;
    let lib = load_library(&lib_path)?;
    check_family(&ckpt, &lib)?;
    check_context(&cfg, state.model.config.context_len)?;
    let mut manifest = ManifestBuilder::start("prune", &s, json!({ "dataset": s.seed, "gates": s.gate_seed }));
    manifest.input(&ckpt)?;
    manifest.input(&lib_path)?;

    let graph = disentangle(&state.model.config, embed).map_err(circuit_failure)?;
    let data = TaskData::from_needle(&build_needle_dataset(&lib, &cfg, s.seed).map_err(eval_failure)?)
        .map_err(circuit_failure)?;
    let gcfg = GateTrainConfig {
        k_scale: s.k,
        steps: s.steps,
        batch_size: s.batch,
        learning_rate: s.lr,
        edge_weight: s.edge_weight,
        anneal: s.anneal,
        seed: s.gate_seed,
        ..GateTrainConfig::default()
    };
    let (gates, log) = train_gates(&state.model, &graph, &data, task, &gcfg).map_err(circuit_failure)?;
    if let Some(last) = log.last() {
        eprintln!("gates: final mse {:.5}, expected density {:.4}", last.mse, last.density);
    }
    let mut circuit = quantize(&gates, &graph, s.sparsity);
    circuit.eval_mse = Some(eval_circuit(&state.model, &graph, &circuit, &data, 16).map_err(circuit_failure)?);
    let full = eval_circuit(&state.model, &graph, &Circuit::full(&graph, task), &data, 16).map_err(circuit_failure)?;

    ilts_core::io::write_atomic(&out, export_circuit(&circuit).as_bytes()).io(format!("writing {}", out.display()))?;
    manifest.finish(std::slice::from_ref(&out), &manifest_path(&out))?;
    let (m1, m2) = circuit.eval_mse.expect("just evaluated");
    println!("edges      {} of {}", circuit.kept_edges.len(), graph.len());
    println!("sparsity   {:.4}", circuit.sparsity());
    println!("circuit    one_after {m1:.5}  two_after {m2:.5}");
    println!("full model one_after {:.5}  two_after {:.5}", full.0, full.1);
    println!("circuit -> {}", out.display());
    Ok(())
}
