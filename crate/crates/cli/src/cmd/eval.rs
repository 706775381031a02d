use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::json;

use ilts_core::datagen::GenConfig;
use ilts_core::evalsuite::{
    build_needle_dataset, eval_needle, eval_needle_position_sweep, eval_restart, eval_uninterleaved, pretrain_loss,
    LabelRecall, MetricsRecord, ModelPredictor, NeedleConfig, Predictor, RecordContext,
};

use super::{
    check_context, check_family, eval_failure, load_library, load_model, parse_aggregation, required, write_csv,
    write_records,
};
use crate::config::merge;
use crate::fail::{mismatch, usage, Failure, Result};
use crate::manifest::{manifest_path, ManifestBuilder};

#[derive(Args, Debug, Serialize)]
pub struct Flags {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Test library.
    #[arg(long)]
    library: Option<PathBuf>,
    /// needle | restart | sweep | uninterleaved | pretrain
    #[arg(long)]
    kind: Option<String>,
    /// Haystack size.
    #[arg(long = "N")]
    #[serde(rename = "n")]
    n: Option<usize>,
    #[arg(long)]
    needle_pos: Option<usize>,
    #[arg(long)]
    configs: Option<usize>,
    #[arg(long)]
    inits: Option<usize>,
    /// Traces for the pretraining-loss evaluation.
    #[arg(long)]
    traces: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// median | pooled
    #[arg(long)]
    aggregation: Option<String>,
    #[arg(long)]
    micro_batch: Option<usize>,
    /// Newline-delimited JSON output.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Optional CSV copy of the records.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub checkpoint: Option<PathBuf>,
    pub library: Option<PathBuf>,
    pub kind: String,
    pub n: usize,
    pub needle_pos: usize,
    pub configs: usize,
    pub inits: usize,
    pub traces: usize,
    pub seed: u64,
    pub aggregation: String,
    pub micro_batch: usize,
    pub out: Option<PathBuf>,
    pub csv: Option<PathBuf>,
}

impl Default for Settings {
    fn default() -> Self {
        let d = NeedleConfig::desk(5);
        Self {
            checkpoint: None,
            library: None,
            kind: "needle".into(),
            n: d.n_systems,
            needle_pos: 0,
            configs: d.n_configs,
            inits: d.n_inits,
            traces: 1000,
            seed: 0,
            aggregation: "median".into(),
            micro_batch: 16,
            out: None,
            csv: None,
        }
    }
}

pub fn needle_config(n: usize, needle_pos: usize, configs: usize, inits: usize) -> NeedleConfig {
    NeedleConfig {
        n_configs: configs,
        n_inits: inits,
        ..NeedleConfig::desk(n)
    }
    .with_needle(needle_pos)
}

pub fn run(flags: &Flags, config: Option<&Path>) -> Result<()> {
    let s: Settings = merge("eval", config, flags)?;
    let ckpt = required(&s.checkpoint, "checkpoint")?;
    let lib_path = required(&s.library, "library")?;
    let out = required(&s.out, "out")?;
    let aggregation = parse_aggregation(&s.aggregation)?;
    let cfg = needle_config(s.n, s.needle_pos, s.configs, s.inits);
    let needs_needle = matches!(s.kind.as_str(), "needle" | "restart" | "sweep");
    if needs_needle {
        cfg.validate().map_err(eval_failure)?;
    }

    let state = load_model(&ckpt)?;
    let lib = load_library(&lib_path)?;
    check_family(&ckpt, &lib)?;
    let context_len = state.model.config.context_len;
    if needs_needle {
        check_context(&cfg, context_len)?;
    }
    let mut manifest = ManifestBuilder::start("eval", &s, json!({ "eval": s.seed }));
    manifest.input(&ckpt)?;
    manifest.input(&lib_path)?;

    let model = ModelPredictor {
        model: &state.model,
        micro_batch: s.micro_batch.max(1),
    };
    let pinv = LabelRecall::pseudoinverse();
    let with_pinv: [&dyn Predictor; 2] = [&model, &pinv];
    let ctx = RecordContext {
        examples_seen: state.examples_seen,
        aggregation,
    };
    let records: Vec<MetricsRecord> = match s.kind.as_str() {
        "needle" => eval_needle(&with_pinv, &build_needle_dataset(&lib, &cfg, s.seed).map_err(eval_failure)?, &ctx),
        "restart" => eval_restart(&with_pinv, &build_needle_dataset(&lib, &cfg, s.seed).map_err(eval_failure)?, &ctx),
        "sweep" => eval_needle_position_sweep(&with_pinv, &lib, &cfg, s.seed, &ctx).map_err(eval_failure)?,
        "uninterleaved" => {
            if lib.length + 3 < context_len {
                return Err(mismatch(format!(
                    "library sequences of {} states cannot fill a context of {context_len}",
                    lib.length
                )));
            }
            eval_uninterleaved(&[&model], &lib, s.inits, context_len, s.seed, &ctx)
        }
        "pretrain" => {
            let gen = GenConfig {
                context_len,
                ..GenConfig::default()
            };
            pretrain_loss(&[&model], &lib, s.traces, s.seed, &gen)
                .map_err(|e| Failure::Mismatch(e.into()))?
                .iter()
                .map(|p| p.to_record(state.examples_seen))
                .collect()
        }
        other => return Err(usage(format!("unknown --kind {other:?}"))),
    };
    write_records(&out, &records)?;
    let mut outputs = vec![out.clone()];
    if let Some(csv) = &s.csv {
        write_csv(csv, &records)?;
        outputs.push(csv.clone());
    }
    manifest.finish(&outputs, &manifest_path(&out))?;
    println!("{} records -> {}", records.len(), out.display());
    Ok(())
}
