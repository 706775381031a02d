use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datagen::EncodedTrace;
use crate::nn::{Tape, Tensor};

use super::forward::{batch_tokens, forward_tape, ParamVars};
use super::Transformer;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub n_checked: usize,
    /// Tensor name and flat index of the worst parameter.
    pub worst: (String, usize),
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Analytic gradients of `scale · Σ_masked ‖pred − target‖²`.
pub struct Analytic {
    pub loss: f64,
    pub params: Vec<Tensor<f64>>,
    /// Gradient with respect to the `len × 5` prediction tensor.
    pub predictions: Tensor<f64>,
    pub output: Tensor<f64>,
}

fn analytic(
    model: &Transformer<f64>,
    trace: &EncodedTrace,
    targets: Vec<f64>,
    mask: Vec<bool>,
    scale: f64,
    corrupt: bool,
) -> Analytic {
    let (tokens, _, _) = batch_tokens::<f64>(&[trace]);
    let mut tape = Tape::new();
    tape.corrupt_attention_grad = corrupt;
    let pv = ParamVars::load(&mut tape, model, true);
    let y = forward_tape(&mut tape, model, &pv, tokens, 1, trace.len);
    let l = tape.masked_sse(y, targets, mask, scale);
    let mut g = tape.backward(l);
    let output = tape.value(y).clone();
    let predictions = g.take(y).unwrap_or_else(|| Tensor::zeros(output.rows, output.cols));
    let params = pv
        .0
        .iter()
        .zip(&model.tensors)
        .map(|(v, t)| g.take(*v).unwrap_or_else(|| Tensor::zeros(t.rows, t.cols)))
        .collect();
    Analytic {
        loss: tape.value(l).data[0],
        params,
        predictions,
        output,
    }
}

fn loss_only(model: &Transformer<f64>, trace: &EncodedTrace, targets: &[f64], mask: &[bool], scale: f64) -> f64 {
    let (tokens, _, _) = batch_tokens::<f64>(&[trace]);
    let mut tape = Tape::new();
    let pv = ParamVars::load(&mut tape, model, false);
    let y = forward_tape(&mut tape, model, &pv, tokens, 1, trace.len);
    let l = tape.masked_sse(y, targets.to_vec(), mask.to_vec(), scale);
    tape.value(l).data[0]
}

fn normalizer(mask: &[bool], out_dim: usize) -> f64 {
    let active = mask.iter().filter(|m| **m).count().max(1);
    1.0 / (active * out_dim) as f64
}

/// Gradients of the per-dimension masked MSE of one trace, with an explicit
/// target and mask (pass the trace's own to get the training loss).
pub fn prediction_gradients(model: &Transformer<f64>, trace: &EncodedTrace, targets: &[f64], mask: &[bool]) -> Analytic {
    let scale = normalizer(mask, model.config.out_dim);
    analytic(model, trace, targets.to_vec(), mask.to_vec(), scale, false)
}

/// Compare backprop against central differences (`h`) on `n_params`
/// parameters drawn uniformly from the whole model.
///
/// Relative error is `|a − n| / max(|a|, |n|)`; pairs where both are below
/// `1e-10` in magnitude count as exact.
pub fn grad_check(
    model: &Transformer<f64>,
    trace: &EncodedTrace,
    n_params: usize,
    h: f64,
    seed: u64,
    corrupt_attention: bool,
) -> GradCheckReport {
    let targets: Vec<f64> = trace.targets.iter().map(|v| *v as f64).collect();
    let mask = trace.loss_mask.clone();
    let scale = normalizer(&mask, model.config.out_dim);
    let an = analytic(model, trace, targets.clone(), mask.clone(), scale, corrupt_attention);

    let sizes: Vec<usize> = model.tensors.iter().map(Tensor::len).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample_indices(&mut rng, total, n_params.min(total));
    let names = model.names();

    let mut work = model.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        n_checked: 0,
        worst: (String::new(), 0),
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    for flat in picks {
        let (mut ti, mut off) = (0, flat);
        while off >= sizes[ti] {
            off -= sizes[ti];
            ti += 1;
        }
        let orig = work.tensors[ti].data[off];
        work.tensors[ti].data[off] = orig + h;
        let plus = loss_only(&work, trace, &targets, &mask, scale);
        work.tensors[ti].data[off] = orig - h;
        let minus = loss_only(&work, trace, &targets, &mask, scale);
        work.tensors[ti].data[off] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let a = an.params[ti].data[off];
        let denom = a.abs().max(numeric.abs());
        let rel = if denom < 1e-10 { 0.0 } else { (a - numeric).abs() / denom };
        report.n_checked += 1;
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst = (names[ti].clone(), off);
            report.worst_analytic = a;
            report.worst_numeric = numeric;
        }
    }
    report
}
