use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::{Deserialize, Serialize};
use serde_json::json;

use ilts_core::datagen::{generate_traces, EncodedTrace, GenConfig};
use ilts_core::model::{
    default_checkpoint_schedule, save_checkpoint, scale_hyperparams, train_step, ModelConfig, ModelState, SizePreset,
    TrainConfig,
};

use super::{load_library, load_model, read_run_info, required, RunInfo, RUN_INFO};
use crate::config::merge;
use crate::fail::{mismatch, usage, Classify, Failure, Result};
use crate::manifest::{sha256_file, ManifestBuilder};

#[derive(Args, Debug, Serialize)]
pub struct Flags {
    #[arg(long)]
    library: Option<PathBuf>,
    /// Directory for checkpoints, the loss log and manifests.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// tiny | small | medium | big
    #[arg(long)]
    preset: Option<String>,
    /// Stop once this many optimizer steps have been taken in total.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Defaults to the preset's scaled learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    micro_batch: Option<usize>,
    /// Seed of the training-trace stream.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    model_seed: Option<u64>,
    /// Rewrite `latest.ckpt` every this many steps.
    #[arg(long)]
    save_every: Option<u64>,
    /// Print the loss every this many steps.
    #[arg(long)]
    log_every: Option<u64>,
    /// Ignore an existing `latest.ckpt` and start over.
    #[arg(long)]
    #[serde(skip)]
    fresh: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub library: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub preset: String,
    pub steps: u64,
    pub batch: Option<usize>,
    pub lr: Option<f64>,
    pub weight_decay: f64,
    pub micro_batch: usize,
    pub seed: u64,
    pub model_seed: u64,
    pub save_every: u64,
    pub log_every: u64,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            library: None,
            out_dir: None,
            preset: "tiny".into(),
            steps: 2000,
            batch: None,
            lr: None,
            weight_decay: 1e-2,
            micro_batch: 16,
            seed: 0,
            model_seed: 0,
            save_every: 100,
            log_every: 50,
        }
    }
}

/// Model and optimizer settings a run starts from.
pub fn train_config(s: &Settings) -> Result<(ModelConfig, TrainConfig)> {
    let preset: SizePreset = s.preset.parse().usage("--preset")?;
    let model = ModelConfig::preset(preset).usage("--preset")?;
    let medium = TrainConfig::medium();
    let batch = s.batch.unwrap_or(if preset == SizePreset::Medium { medium.batch_size } else { 64 });
    if batch == 0 || s.micro_batch == 0 {
        return Err(usage("--batch and --micro-batch must be positive"));
    }
    let mut t = scale_hyperparams(&medium, &model, batch).usage("--preset")?;
    if let Some(lr) = s.lr {
        t.learning_rate = lr;
    }
    t.weight_decay = s.weight_decay;
    t.micro_batch = s.micro_batch;
    t.seed = s.seed;
    t.checkpoint_schedule = default_checkpoint_schedule(s.steps * batch as u64);
    Ok((model, t))
}

fn save(state: &ModelState, path: &Path) -> Result<()> {
    save_checkpoint(state, path).io(format!("writing {}", path.display()))
}

pub fn run(flags: &Flags, config: Option<&Path>) -> Result<()> {
    let s: Settings = merge("train", config, flags)?;
    let lib_path = required(&s.library, "library")?;
    let dir = required(&s.out_dir, "out-dir")?;
    let (model_cfg, train_cfg) = train_config(&s)?;
    std::fs::create_dir_all(&dir).io(format!("creating {}", dir.display()))?;
    let lib = load_library(&lib_path)?;
    let info = RunInfo {
        preset: s.preset.to_ascii_lowercase(),
        family: lib.family,
        library_sha256: sha256_file(&lib_path)?,
        context_len: model_cfg.context_len,
    };

    let latest = dir.join("latest.ckpt");
    let mut state = if latest.exists() && !flags.fresh {
        let st = load_model(&latest)?;
        if st.model.config != model_cfg {
            return Err(mismatch(format!("{} holds a different model shape", latest.display())));
        }
        if let Some(prev) = read_run_info(&dir)? {
            if prev != info {
                return Err(mismatch("library or preset differs from the run being resumed"));
            }
        }
        eprintln!("resuming at step {} ({} examples)", st.step, st.examples_seen);
        st
    } else {
        ModelState::new(model_cfg, s.model_seed, train_cfg).usage("model")?
    };
    let info_path = dir.join(RUN_INFO);
    ilts_core::io::write_atomic(&info_path, &serde_json::to_vec_pretty(&info).expect("run info"))
        .io("writing run info")?;

    let mut manifest = ManifestBuilder::start(
        "train",
        &json!({ "settings": &s, "model": &state.model.config, "train": &state.train }),
        json!({ "traces": state.train.seed, "model": s.model_seed }),
    );
    manifest.input(&lib_path)?;
    if latest.exists() && !flags.fresh {
        manifest.input(&latest)?;
    }

    let log_path = dir.join("train_log.ndjson");
    truncate_log(&log_path, state.step)?;
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .io(format!("opening {}", log_path.display()))?;
    let gen = GenConfig {
        context_len: state.model.config.context_len,
        ..GenConfig::default()
    };
    let start_step = state.step;
    let mut outputs = vec![info_path, log_path.clone(), latest.clone()];
    let clock = std::time::Instant::now();
    while state.step < s.steps {
        let batch: Vec<EncodedTrace> = generate_traces(&lib, &gen, state.train.seed, state.examples_seen, state.train.batch_size)
            .map_err(|e| Failure::Mismatch(e.into()))?
            .iter()
            .map(|t| t.encode())
            .collect();
        let before = state.examples_seen;
        let loss = train_step(&mut state, &batch).other("training step")?;
        let line = json!({ "step": state.step - 1, "examples_seen": state.examples_seen, "loss": loss });
        writeln!(log, "{line}").io("writing loss log")?;
        if s.log_every > 0 && state.step % s.log_every == 0 {
            eprintln!(
                "step {:>6}  examples {:>9}  loss {loss:.5}  {:.1}s",
                state.step,
                state.examples_seen,
                clock.elapsed().as_secs_f64()
            );
        }
        for &e in &state.train.checkpoint_schedule {
            if before < e && e <= state.examples_seen {
                let p = dir.join(format!("ckpt-{:012}.ckpt", state.examples_seen));
                save(&state, &p)?;
                outputs.push(p);
            }
        }
        if s.save_every > 0 && state.step % s.save_every == 0 {
            save(&state, &latest)?;
        }
    }
    log.flush().io("flushing loss log")?;
    drop(log);
    save(&state, &latest)?;
    let mpath = dir.join(format!("manifest.step{start_step:08}.json"));
    manifest.finish(&outputs, &mpath)?;
    println!("trained to step {} ({} examples)", state.step, state.examples_seen);
    println!("checkpoint {}", latest.display());
    Ok(())
}

/// Drop log lines from steps at or after `step`, so a resumed run appends
/// exactly where its checkpoint left off.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let text = std::fs::read_to_string(path).io(format!("reading {}", path.display()))?;
    let mut kept = String::new();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).io("parsing loss log")?;
        if v["step"].as_u64().is_some_and(|s| s < step) {
            kept.push_str(line);
            kept.push('\n');
        }
    }
    ilts_core::io::write_atomic(path, kept.as_bytes()).io(format!("writing {}", path.display()))
}
