//! Evaluation datasets and metrics.
//!
//! Every metric is a squared error `‖prediction − target‖²` at a named
//! prediction site, summarized by quartiles. Indices are 1-based counts into
//! a segment: index `k` is the prediction whose target is the segment's
//! `k`-th observation, emitted `k − 1` positions after its open label.

mod needle;
mod predictors;

pub use needle::{
    build_needle_control, build_needle_dataset, LibraryId, NeedleConfig, NeedleDataset, NeedleLayout, NeedleMeta, OodKind,
    CONTROL_POSITION, NEEDLE_INDICES,
};
pub use predictors::{LabelRecall, ModelPredictor, Predictor, ZeroPredictor};

use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{generate_traces, trace_rng, GenConfig, InterleavedTrace, ObsRef, TokenKind, TraceLibrary, N_LABEL_PAIRS};
use crate::dynsys::sq_dist;
use crate::error::{DatagenError, EvalError};
use crate::stats::{median, Quantiles};

/// Restart curves cover this many steps into each segment.
pub const RESTART_STEPS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalKind {
    Uninterleaved,
    NeedleAfterFinal,
    NeedleAfterInitial,
    Restart,
    PretrainLoss,
}

/// How per-sample errors become quartiles.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Median over initial states within each configuration, then quartiles
    /// across configurations.
    #[default]
    MedianThenQuantile,
    /// Quartiles over every sample at once.
    Pooled,
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub checkpoint_examples_seen: u64,
    pub eval_kind: EvalKind,
    /// `model`, `pinv`, `perfect_recall` or `zero`.
    pub predictor: String,
    /// `baseline`, `control`, or the out-of-distribution construction.
    pub variant: String,
    pub haystack_size: usize,
    /// `None` where no needle exists; [`CONTROL_POSITION`] for the uncut control.
    pub needle_position: Option<i64>,
    /// Haystack segment for restart curves.
    pub segment: Option<usize>,
    pub index_within_segment: usize,
    pub quantiles: Quantiles,
    /// Plain mean, reported for pretraining loss.
    pub mean: Option<f64>,
    pub n_samples: usize,
}

pub const CSV_HEADER: &str = "checkpoint_examples_seen,eval_kind,predictor,variant,haystack_size,needle_position,segment,index_within_segment,q25,q50,q75,mean,n_samples";

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        let kind = serde_json::to_value(self.eval_kind).expect("enum serializes");
        let opt = |v: Option<String>| v.unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.checkpoint_examples_seen,
            kind.as_str().unwrap_or_default(),
            self.predictor,
            self.variant,
            self.haystack_size,
            opt(self.needle_position.map(|v| v.to_string())),
            opt(self.segment.map(|v| v.to_string())),
            self.index_within_segment,
            self.quantiles.q25,
            self.quantiles.q50,
            self.quantiles.q75,
            opt(self.mean.map(|v| v.to_string())),
            self.n_samples
        )
    }
}

pub fn write_ndjson<W: Write>(mut w: W, records: &[MetricsRecord]) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_ndjson<R: BufRead>(r: R) -> Result<Vec<MetricsRecord>, serde_json::Error> {
    r.lines()
        .map(|l| l.map_err(serde_json::Error::io))
        .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()))
        .map(|l| serde_json::from_str(&l?))
        .collect()
}

pub fn write_csv<W: Write>(mut w: W, records: &[MetricsRecord]) -> std::io::Result<()> {
    writeln!(w, "{CSV_HEADER}")?;
    for r in records {
        writeln!(w, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Squared errors at `sites` for every trace: `out[s][n]`.
pub fn site_errors(predictor: &dyn Predictor, traces: &[InterleavedTrace], sites: &[usize]) -> Vec<Vec<f64>> {
    const CHUNK: usize = 512;
    let mut out = vec![Vec::with_capacity(traces.len()); sites.len()];
    for chunk in traces.chunks(CHUNK) {
        let preds = predictor.predict(chunk);
        for (t, p) in chunk.iter().zip(&preds) {
            for (s, &pos) in sites.iter().enumerate() {
                out[s].push(sq_dist(&p[pos], &t.payloads[pos + 1]));
            }
        }
    }
    out
}

/// Quartiles of `errors`, laid out group-major in groups of `group_size`.
pub fn aggregate(errors: &[f64], group_size: usize, how: Aggregation) -> (Quantiles, usize) {
    assert!(group_size > 0 && errors.len().is_multiple_of(group_size), "ragged groups");
    match how {
        Aggregation::Pooled => (Quantiles::of(errors), errors.len()),
        Aggregation::MedianThenQuantile => {
            let medians: Vec<f64> = errors.chunks(group_size).map(median).collect();
            let n = medians.len();
            (Quantiles::of(&medians), n)
        }
    }
}

/// Fields shared by every record of one evaluation call.
#[derive(Clone, Debug)]
pub struct RecordContext {
    pub examples_seen: u64,
    pub aggregation: Aggregation,
}

impl Default for RecordContext {
    fn default() -> Self {
        Self {
            examples_seen: 0,
            aggregation: Aggregation::MedianThenQuantile,
        }
    }
}

fn variant_name(ds: &NeedleDataset) -> String {
    match (ds.meta.ood, ds.meta.control) {
        (Some(k), _) => k.to_string(),
        (None, true) => "control".into(),
        (None, false) => "baseline".into(),
    }
}

/// Errors at after-final and after-initial indices `{1, 2, 3, 7, 8}`.
pub fn eval_needle(predictors: &[&dyn Predictor], ds: &NeedleDataset, ctx: &RecordContext) -> Vec<MetricsRecord> {
    let layout = &ds.meta.layout;
    let seg_len = ds.meta.cfg.seg_len;
    let ks: Vec<usize> = NEEDLE_INDICES.iter().copied().filter(|k| *k <= seg_len).collect();
    let mut sites: Vec<(EvalKind, usize, usize)> = ks
        .iter()
        .map(|&k| (EvalKind::NeedleAfterFinal, k, layout.after_final[k - 1]))
        .collect();
    sites.extend(ks.iter().map(|&k| (EvalKind::NeedleAfterInitial, k, layout.after_open(0, k))));
    let positions: Vec<usize> = sites.iter().map(|s| s.2).collect();
    let needle_position = if ds.meta.control {
        CONTROL_POSITION
    } else {
        ds.needle() as i64
    };
    let variant = variant_name(ds);
    let mut out = Vec::new();
    for p in predictors {
        let errs = site_errors(*p, &ds.traces, &positions);
        for ((kind, k, _), e) in sites.iter().zip(&errs) {
            let (quantiles, n_samples) = aggregate(e, ds.meta.cfg.n_inits, ctx.aggregation);
            out.push(MetricsRecord {
                checkpoint_examples_seen: ctx.examples_seen,
                eval_kind: *kind,
                predictor: p.name().to_string(),
                variant: variant.clone(),
                haystack_size: ds.n_systems(),
                needle_position: Some(needle_position),
                segment: None,
                index_within_segment: *k,
                quantiles,
                mean: None,
                n_samples,
            });
        }
    }
    out
}

/// Errors at steps `1..=8` into every haystack segment.
pub fn eval_restart(predictors: &[&dyn Predictor], ds: &NeedleDataset, ctx: &RecordContext) -> Vec<MetricsRecord> {
    let steps = RESTART_STEPS.min(ds.meta.cfg.seg_len);
    let sites: Vec<(usize, usize)> = (0..ds.n_systems())
        .flat_map(|j| (1..=steps).map(move |s| (j, s)))
        .collect();
    let positions: Vec<usize> = sites.iter().map(|&(j, s)| ds.meta.layout.after_open(j, s)).collect();
    let variant = variant_name(ds);
    let mut out = Vec::new();
    for p in predictors {
        let errs = site_errors(*p, &ds.traces, &positions);
        for (&(j, s), e) in sites.iter().zip(&errs) {
            let (quantiles, n_samples) = aggregate(e, ds.meta.cfg.n_inits, ctx.aggregation);
            out.push(MetricsRecord {
                checkpoint_examples_seen: ctx.examples_seen,
                eval_kind: EvalKind::Restart,
                predictor: p.name().to_string(),
                variant: variant.clone(),
                haystack_size: ds.n_systems(),
                needle_position: None,
                segment: Some(j),
                index_within_segment: s,
                quantiles,
                mean: None,
                n_samples,
            });
        }
    }
    out
}

/// After-final errors for every needle position `0..N` plus the uncut
/// control.
pub fn eval_needle_position_sweep(
    predictors: &[&dyn Predictor],
    lib: &TraceLibrary,
    cfg: &NeedleConfig,
    seed: u64,
    ctx: &RecordContext,
) -> Result<Vec<MetricsRecord>, EvalError> {
    let mut out = Vec::new();
    let mut datasets = Vec::with_capacity(cfg.n_systems + 1);
    for p in 0..cfg.n_systems {
        datasets.push(build_needle_dataset(lib, &cfg.clone().with_needle(p), seed)?);
    }
    datasets.push(build_needle_control(lib, cfg, seed)?);
    for ds in &datasets {
        out.extend(
            eval_needle(predictors, ds, ctx)
                .into_iter()
                .filter(|r| r.eval_kind == EvalKind::NeedleAfterFinal),
        );
    }
    Ok(out)
}

/// One uninterleaved trace per (system, initial state): start, open label,
/// `len − 3` observations, close label.
pub fn build_uninterleaved(lib: &TraceLibrary, n_inits: usize, context_len: usize, seed: u64) -> Vec<InterleavedTrace> {
    let n_obs = context_len.saturating_sub(3).min(lib.length);
    let n_inits = n_inits.min(lib.n_inits());
    let mut out = Vec::with_capacity(lib.n_systems() * n_inits);
    for s in 0..lib.n_systems() {
        for i in 0..n_inits {
            let pair = trace_rng(seed, (s * n_inits + i) as u64).gen_range(0..N_LABEL_PAIRS) as u8;
            let mut t = InterleavedTrace::new();
            t.push_special(TokenKind::Open(pair));
            for (j, x) in lib.states(s, i, 0, n_obs).into_iter().enumerate() {
                t.push_obs(
                    ObsRef {
                        slot: 0,
                        system: s as u32,
                        init: i as u32,
                        step: j as u32,
                    },
                    x,
                );
            }
            t.push_special(TokenKind::Close(pair));
            out.push(t);
        }
    }
    out
}

/// Error at every observation index of long uninterleaved traces, grouped by
/// system. The pseudoinverse baseline is always evaluated on the same traces
/// and appended.
pub fn eval_uninterleaved(
    predictors: &[&dyn Predictor],
    lib: &TraceLibrary,
    n_inits: usize,
    context_len: usize,
    seed: u64,
    ctx: &RecordContext,
) -> Vec<MetricsRecord> {
    let traces = build_uninterleaved(lib, n_inits, context_len, seed);
    let per_system = traces.len() / lib.n_systems();
    let n_obs = traces[0].len() - 3;
    let positions: Vec<usize> = (1..=n_obs).collect();
    let pinv = LabelRecall::pseudoinverse();
    let mut all: Vec<&dyn Predictor> = predictors.to_vec();
    all.push(&pinv);
    let mut out = Vec::new();
    for p in all {
        let errs = site_errors(p, &traces, &positions);
        for (k, e) in errs.iter().enumerate() {
            let (quantiles, n_samples) = aggregate(e, per_system, ctx.aggregation);
            out.push(MetricsRecord {
                checkpoint_examples_seen: ctx.examples_seen,
                eval_kind: EvalKind::Uninterleaved,
                predictor: p.name().to_string(),
                variant: "baseline".into(),
                haystack_size: 1,
                needle_position: None,
                segment: Some(0),
                index_within_segment: k + 1,
                quantiles,
                mean: None,
                n_samples,
            });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainLoss {
    pub predictor: String,
    /// Mean of `‖prediction − target‖²` over every masked position.
    pub mean: f64,
    /// Quartiles of the per-trace means.
    pub per_trace: Quantiles,
    pub n_traces: usize,
    pub n_positions: usize,
}

impl PretrainLoss {
    pub fn to_record(&self, examples_seen: u64) -> MetricsRecord {
        MetricsRecord {
            checkpoint_examples_seen: examples_seen,
            eval_kind: EvalKind::PretrainLoss,
            predictor: self.predictor.clone(),
            variant: "baseline".into(),
            haystack_size: 0,
            needle_position: None,
            segment: None,
            index_within_segment: 0,
            quantiles: self.per_trace,
            mean: Some(self.mean),
            n_samples: self.n_traces,
        }
    }
}

/// Mean masked squared error over `n_traces` freshly interleaved traces
/// (traces `0..n_traces` of stream `seed`). The pseudoinverse predictor's
/// value on the same traces is appended last.
pub fn pretrain_loss(
    predictors: &[&dyn Predictor],
    lib: &TraceLibrary,
    n_traces: usize,
    seed: u64,
    cfg: &GenConfig,
) -> Result<Vec<PretrainLoss>, DatagenError> {
    let pinv = LabelRecall::pseudoinverse();
    let mut all: Vec<&dyn Predictor> = predictors.to_vec();
    all.push(&pinv);
    let mut sums = vec![0.0f64; all.len()];
    let mut per_trace: Vec<Vec<f64>> = vec![Vec::with_capacity(n_traces); all.len()];
    let mut n_positions = 0usize;
    const CHUNK: u64 = 512;
    let mut first = 0u64;
    while first < n_traces as u64 {
        let count = CHUNK.min(n_traces as u64 - first) as usize;
        let traces = generate_traces(lib, cfg, seed, first, count)?;
        let masks: Vec<Vec<bool>> = traces.iter().map(|t| t.targets_and_mask().1).collect();
        n_positions += masks.iter().flatten().filter(|m| **m).count();
        for (pi, p) in all.iter().enumerate() {
            let preds = p.predict(&traces);
            for ((t, pred), mask) in traces.iter().zip(&preds).zip(&masks) {
                let mut s = 0.0;
                let mut n = 0usize;
                for (pos, m) in mask.iter().enumerate() {
                    if *m {
                        s += sq_dist(&pred[pos], &t.payloads[pos + 1]);
                        n += 1;
                    }
                }
                sums[pi] += s;
                per_trace[pi].push(if n > 0 { s / n as f64 } else { 0.0 });
            }
        }
        first += count as u64;
    }
    Ok(all
        .iter()
        .zip(sums)
        .zip(per_trace)
        .map(|((p, s), pt)| PretrainLoss {
            predictor: p.name().to_string(),
            mean: s / n_positions.max(1) as f64,
            per_trace: Quantiles::of(&pt),
            n_traces,
            n_positions,
        })
        .collect())
}
