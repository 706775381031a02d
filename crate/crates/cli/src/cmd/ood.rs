use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::json;

use ilts_core::error::OodError;
use ilts_core::evalsuite::{build_needle_dataset, eval_needle, LabelRecall, ModelPredictor, Predictor, RecordContext};
use ilts_core::oodlab::{
    default_wrong_segment, make_seen_label_new_sequence, make_swap, make_synchronized, make_unseen_label, sync_defect,
};

use super::eval::needle_config;
use super::{
    check_context, check_family, eval_failure, load_library, load_model, parse_aggregation, required, write_records,
};
use crate::config::merge;
use crate::fail::{usage, Classify, Failure, Result};
use crate::manifest::{manifest_path, ManifestBuilder};

/// Largest tolerated `‖U_k x₉ − x₁₀‖` in a synchronized dataset.
pub const SYNC_TOLERANCE: f64 = 1e-9;

#[derive(Args, Debug, Serialize)]
pub struct Flags {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    library: Option<PathBuf>,
    /// swap | sync | unseen | seen-new
    #[arg(long)]
    kind: Option<String>,
    #[arg(long = "N")]
    #[serde(rename = "n")]
    n: Option<usize>,
    #[arg(long)]
    needle_pos: Option<usize>,
    /// Segment whose label the swap borrows.
    #[arg(long)]
    wrong_segment: Option<usize>,
    /// Library supplying new sequences for `seen-new`.
    #[arg(long)]
    fresh_library: Option<PathBuf>,
    #[arg(long)]
    configs: Option<usize>,
    #[arg(long)]
    inits: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    aggregation: Option<String>,
    #[arg(long)]
    micro_batch: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the modified dataset.
    #[arg(long)]
    dataset_out: Option<PathBuf>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub checkpoint: Option<PathBuf>,
    pub library: Option<PathBuf>,
    pub kind: String,
    pub n: usize,
    pub needle_pos: usize,
    pub wrong_segment: Option<usize>,
    pub fresh_library: Option<PathBuf>,
    pub configs: usize,
    pub inits: usize,
    pub seed: u64,
    pub aggregation: String,
    pub micro_batch: usize,
    pub out: Option<PathBuf>,
    pub dataset_out: Option<PathBuf>,
}

impl Default for Settings {
    fn default() -> Self {
        let e = super::eval::Settings::default();
        Self {
            checkpoint: None,
            library: None,
            kind: "swap".into(),
            n: e.n,
            needle_pos: 0,
            wrong_segment: None,
            fresh_library: None,
            configs: e.configs,
            inits: e.inits,
            seed: 0,
            aggregation: e.aggregation,
            micro_batch: e.micro_batch,
            out: None,
            dataset_out: None,
        }
    }
}

fn ood_failure(e: OodError) -> Failure {
    match e {
        OodError::FamilyUnsupported | OodError::SystemCollision(_) => Failure::Mismatch(e.into()),
        OodError::Eval(inner) => eval_failure(inner),
        other => Failure::Usage(other.into()),
    }
}

pub fn run(flags: &Flags, config: Option<&Path>) -> Result<()> {
    let s: Settings = merge("ood", config, flags)?;
    let ckpt = required(&s.checkpoint, "checkpoint")?;
    let lib_path = required(&s.library, "library")?;
    let out = required(&s.out, "out")?;
    let aggregation = parse_aggregation(&s.aggregation)?;
    let cfg = needle_config(s.n, s.needle_pos, s.configs, s.inits);
    cfg.validate().map_err(eval_failure)?;

    let state = load_model(&ckpt)?;
    let lib = load_library(&lib_path)?;
    check_family(&ckpt, &lib)?;
    check_context(&cfg, state.model.config.context_len)?;
    let mut manifest = ManifestBuilder::start("ood", &s, json!({ "dataset": s.seed }));
    manifest.input(&ckpt)?;
    manifest.input(&lib_path)?;

    let ds = match s.kind.as_str() {
        "sync" => {
            let ds = make_synchronized(&lib, &cfg, s.seed).map_err(ood_failure)?;
            let worst = (0..cfg.n_configs)
                .flat_map(|c| (0..cfg.n_inits).map(move |i| (c, i)))
                .map(|(c, i)| sync_defect(&lib, &ds, c, i))
                .fold(0.0, f64::max);
            if worst > SYNC_TOLERANCE {
                return Err(Failure::Other(anyhow::anyhow!(
                    "synchronized dataset is off by {worst:e}, above {SYNC_TOLERANCE:e}"
                )));
            }
            eprintln!("synchronization check passed (max defect {worst:.3e})");
            ds
        }
        kind => {
            let base = build_needle_dataset(&lib, &cfg, s.seed).map_err(eval_failure)?;
            match kind {
                "swap" => make_swap(&base, s.wrong_segment.unwrap_or_else(|| default_wrong_segment(&base))),
                "unseen" => make_unseen_label(&base, s.seed),
                "seen-new" => {
                    let fresh_path = required(&s.fresh_library, "fresh-library")?;
                    let fresh = load_library(&fresh_path)?;
                    manifest.input(&fresh_path)?;
                    make_seen_label_new_sequence(&base, &fresh)
                }
                other => return Err(usage(format!("unknown --kind {other:?}"))),
            }
            .map_err(ood_failure)?
        }
    };

    let model = ModelPredictor {
        model: &state.model,
        micro_batch: s.micro_batch.max(1),
    };
    let pinv = LabelRecall::pseudoinverse();
    let predictors: [&dyn Predictor; 2] = [&model, &pinv];
    let ctx = RecordContext {
        examples_seen: state.examples_seen,
        aggregation,
    };
    let records = eval_needle(&predictors, &ds, &ctx);
    write_records(&out, &records)?;
    let mut outputs = vec![out.clone()];
    if let Some(p) = &s.dataset_out {
        ilts_core::io::write_atomic(p, &ds.to_bytes()).io(format!("writing {}", p.display()))?;
        outputs.push(p.clone());
    }
    manifest.finish(&outputs, &manifest_path(&out))?;
    println!("{} records -> {}", records.len(), out.display());
    Ok(())
}
