use serde::{Deserialize, Serialize};

use crate::datagen::EncodedTrace;
use crate::error::ModelError;
use crate::nn::{Tape, Tensor};

use super::forward::{batch_tokens, forward_tape, ParamVars};
use super::{ModelConfig, SizePreset, Transformer};

/// Medium-preset learning rate at batch 512.
pub const MEDIUM_LR: f64 = 1.58e-5;
pub const MEDIUM_BATCH: usize = 512;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Seed of the training-trace stream. Trace `i` of the stream is drawn
    /// from its own RNG, so the stream position is simply `examples_seen`.
    pub seed: u64,
    /// Traces per forward/backward pass; gradients are accumulated across
    /// micro-batches before the optimizer step.
    pub micro_batch: usize,
    pub checkpoint_schedule: Vec<u64>,
}

impl TrainConfig {
    /// Batch 512, lr 1.58e-5, weight decay 1e-2.
    pub fn medium() -> Self {
        Self {
            batch_size: MEDIUM_BATCH,
            learning_rate: MEDIUM_LR,
            weight_decay: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            micro_batch: 16,
            checkpoint_schedule: default_checkpoint_schedule(1 << 24),
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::medium()
    }
}

/// `2^16, 2^17, …` up to and including `max_examples`.
pub fn default_checkpoint_schedule(max_examples: u64) -> Vec<u64> {
    let mut out = Vec::new();
    let mut e = 1u64 << 16;
    while e <= max_examples {
        out.push(e);
        e *= 2;
    }
    out
}

/// Learning-rate ladder relative to Medium at batch 512, with square-root
/// batch scaling.
pub fn scale_hyperparams(base: &TrainConfig, target: &ModelConfig, batch: usize) -> Result<TrainConfig, ModelError> {
    let factor = match target.size_name {
        SizePreset::Medium => 1.0,
        SizePreset::Small => 2.0,
        SizePreset::Tiny => 4.0,
        SizePreset::Big => 5.0 / 6.0,
        SizePreset::Custom => return Err(ModelError::UnknownPreset("custom".into())),
    };
    let mut out = base.clone();
    out.batch_size = batch;
    out.learning_rate = base.learning_rate * factor * (batch as f64 / MEDIUM_BATCH as f64).sqrt();
    Ok(out)
}

/// Mean of squared differences over masked rows and all columns.
/// `predictions` and `targets` are row-major with `mask.len()` rows.
pub fn masked_mse(predictions: &[f64], targets: &[f64], mask: &[bool]) -> Result<f64, ModelError> {
    if predictions.len() != targets.len() || mask.is_empty() || !predictions.len().is_multiple_of(mask.len()) {
        return Err(ModelError::ShapeMismatch(format!(
            "predictions {} / targets {} / mask {}",
            predictions.len(),
            targets.len(),
            mask.len()
        )));
    }
    let dim = predictions.len() / mask.len();
    let active = mask.iter().filter(|m| **m).count();
    if active == 0 {
        return Err(ModelError::EmptyMask);
    }
    let sse: f64 = mask
        .iter()
        .enumerate()
        .filter(|(_, m)| **m)
        .flat_map(|(r, _)| (r * dim..(r + 1) * dim).map(|i| (predictions[i] - targets[i]).powi(2)))
        .sum();
    Ok(sse / (active * dim) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl AdamState {
    pub fn new(model: &Transformer<f32>) -> Self {
        let zeros: Vec<Tensor<f32>> = model.tensors.iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect();
        Self {
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// Everything needed to resume training.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub model: Transformer<f32>,
    pub adam: AdamState,
    pub train: TrainConfig,
    pub examples_seen: u64,
    pub step: u64,
}

impl ModelState {
    pub fn new(config: ModelConfig, model_seed: u64, train: TrainConfig) -> Result<Self, ModelError> {
        let model = Transformer::init(config, model_seed)?;
        let adam = AdamState::new(&model);
        Ok(Self {
            model,
            adam,
            train,
            examples_seen: 0,
            step: 0,
        })
    }
}

/// Loss and summed gradients of the per-dimension masked MSE over `batch`,
/// with the normalizer taken over the whole batch.
pub(crate) fn loss_and_grads(
    model: &Transformer<f32>,
    batch: &[EncodedTrace],
    micro_batch: usize,
) -> Result<(f64, Vec<Tensor<f32>>), ModelError> {
    let active: usize = batch.iter().map(|t| t.loss_mask.iter().filter(|m| **m).count()).sum();
    if active == 0 {
        return Err(ModelError::EmptyMask);
    }
    let out_dim = model.config.out_dim;
    let scale = 1.0 / (active * out_dim) as f64;
    let chunks = group_by_len(batch, micro_batch.max(1));
    let run = |chunk: &Vec<&EncodedTrace>| -> (f64, Vec<Option<Tensor<f32>>>) {
        let seq = chunk[0].len;
        let (tokens, targets, mask) = batch_tokens::<f32>(chunk);
        let mut tape = Tape::new();
        let pv = ParamVars::load(&mut tape, model, true);
        let y = forward_tape(&mut tape, model, &pv, tokens, chunk.len(), seq);
        let l = tape.masked_sse(y, targets, mask, scale as f32);
        let loss = tape.value(l).data[0] as f64;
        let mut g = tape.backward(l);
        (loss, pv.0.iter().map(|v| g.take(*v)).collect())
    };
    // Micro-batch results are summed in chunk order, so the result does not
    // depend on the thread count.
    #[cfg(feature = "parallel")]
    let parts: Vec<_> = {
        use rayon::prelude::*;
        chunks.par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<_> = chunks.iter().map(run).collect();
    let mut grads: Vec<Tensor<f32>> = model.tensors.iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect();
    let mut loss = 0.0f64;
    for (l, gs) in parts {
        loss += l;
        for (acc, gv) in grads.iter_mut().zip(gs) {
            if let Some(gv) = gv {
                acc.add_assign(&gv);
            }
        }
    }
    Ok((loss, grads))
}

fn group_by_len(batch: &[EncodedTrace], size: usize) -> Vec<Vec<&EncodedTrace>> {
    let mut order: Vec<&EncodedTrace> = batch.iter().collect();
    order.sort_by_key(|t| t.len);
    let mut out: Vec<Vec<&EncodedTrace>> = Vec::new();
    for t in order {
        match out.last_mut() {
            Some(c) if c.len() < size && c[0].len == t.len => c.push(t),
            _ => out.push(vec![t]),
        }
    }
    out
}

/// One AdamW update on `batch`. Returns the pre-update loss.
///
/// Decoupled weight decay is applied to every parameter as
/// `p ← p·(1 − lr·wd)` before the Adam step.
pub fn train_step(state: &mut ModelState, batch: &[EncodedTrace]) -> Result<f64, ModelError> {
    let cfg = state.train.clone();
    let (loss, grads) = loss_and_grads(&state.model, batch, cfg.micro_batch)?;
    let grads_finite = grads.iter().all(|g| g.data.iter().all(|v| v.is_finite()));
    if !loss.is_finite() || !grads_finite {
        return Err(ModelError::NonFiniteLoss {
            loss,
            step: state.step,
            examples_seen: state.examples_seen,
        });
    }
    let adam = &mut state.adam;
    adam.t += 1;
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
    let bc1 = 1.0 - cfg.beta1.powi(adam.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(adam.t as i32);
    let lr = cfg.learning_rate as f32;
    let decay = 1.0 - (cfg.learning_rate * cfg.weight_decay) as f32;
    let (bc1, bc2, eps) = (bc1 as f32, bc2 as f32, cfg.eps as f32);
    for (((p, g), m), v) in state
        .model
        .tensors
        .iter_mut()
        .zip(&grads)
        .zip(&mut adam.m)
        .zip(&mut adam.v)
    {
        for i in 0..p.data.len() {
            let gi = g.data[i];
            m.data[i] = b1 * m.data[i] + (1.0 - b1) * gi;
            v.data[i] = b2 * v.data[i] + (1.0 - b2) * gi * gi;
            let mhat = m.data[i] / bc1;
            let vhat = v.data[i] / bc2;
            p.data[i] = p.data[i] * decay - lr * (mhat / (vhat.sqrt() + eps));
        }
    }
    state.examples_seen += batch.len() as u64;
    state.step += 1;
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{build_library, generate_traces, GenConfig};
    use crate::dynsys::Family;

    fn batch(family: Family, n: usize, seed: u64) -> Vec<EncodedTrace> {
        let lib = build_library(40, 1, 251, family, seed);
        generate_traces(&lib, &GenConfig::default(), seed + 1, 0, n)
            .unwrap()
            .iter()
            .map(|t| t.encode())
            .collect()
    }

    #[test]
    fn masked_mse_examples() {
        let p = [1.0, 0.0, 0.0, 0.0, 0.0, 3.0, 3.0, 3.0, 3.0, 3.0];
        let t = [0.0; 10];
        assert!((masked_mse(&p, &t, &[true, false]).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(masked_mse(&p, &p, &[true, true]).unwrap(), 0.0);
        assert!(matches!(masked_mse(&p, &t, &[false, false]), Err(ModelError::EmptyMask)));
    }

    #[test]
    fn ladder_matches_reference_rates() {
        let base = TrainConfig::medium();
        let m = scale_hyperparams(&base, &ModelConfig::medium(), 512).unwrap();
        assert!((m.learning_rate - 1.58e-5).abs() < 1e-12);
        let s = scale_hyperparams(&base, &ModelConfig::preset(SizePreset::Small).unwrap(), 1024).unwrap();
        assert!((s.learning_rate / 4.5e-5 - 1.0).abs() < 0.01);
        let t = scale_hyperparams(&base, &ModelConfig::tiny(), 2048).unwrap();
        assert!((t.learning_rate / 1.7e-4 - 1.0).abs() < 0.35);
        let custom = ModelConfig::custom(2, 32, 2, 16).unwrap();
        assert!(matches!(
            scale_hyperparams(&base, &custom, 512),
            Err(ModelError::UnknownPreset(_))
        ));
    }

    #[test]
    fn schedule_is_geometric() {
        assert_eq!(default_checkpoint_schedule(300_000), vec![65_536, 131_072, 262_144]);
    }

    #[test]
    fn zero_lr_zero_decay_is_identity() {
        let mut cfg = TrainConfig::medium();
        cfg.learning_rate = 0.0;
        cfg.weight_decay = 0.0;
        let mut state = ModelState::new(ModelConfig::tiny(), 0, cfg).unwrap();
        let before = state.model.clone();
        let b = batch(Family::Orthogonal, 4, 2);
        train_step(&mut state, &b).unwrap();
        assert!(state.model.bit_eq(&before));
        assert_eq!(state.examples_seen, 4);
        train_step(&mut state, &b).unwrap();
        assert_eq!(state.examples_seen, 8);
        assert_eq!(state.step, 2);
    }

    #[test]
    fn micro_batching_matches_full_batch() {
        let model = Transformer::<f32>::init(ModelConfig::tiny(), 3).unwrap();
        let b = batch(Family::Orthogonal, 4, 5);
        let (l1, g1) = loss_and_grads(&model, &b, 4).unwrap();
        let (l2, g2) = loss_and_grads(&model, &b, 1).unwrap();
        assert!((l1 - l2).abs() < 1e-6);
        for (a, c) in g1.iter().zip(&g2) {
            assert!(a.max_abs_diff(c) < 1e-5);
        }
    }

    #[test]
    fn loss_decreases_on_fixed_batch() {
        let mut cfg = TrainConfig::medium();
        cfg.learning_rate = 1e-3;
        let mut state = ModelState::new(ModelConfig::tiny(), 0, cfg).unwrap();
        let b = batch(Family::Identity, 8, 9);
        let first = train_step(&mut state, &b).unwrap();
        let mut last = first;
        for _ in 0..49 {
            last = train_step(&mut state, &b).unwrap();
        }
        assert!(last < first, "loss {first} -> {last}");
    }
}
