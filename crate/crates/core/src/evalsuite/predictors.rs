use crate::datagen::{InterleavedTrace, TokenKind};
use crate::dynsys::{exact_solve, pinv_predict, State, STATE_DIM};
use crate::model::{forward, Transformer};

/// Anything that emits a next-observation prediction at every position.
///
/// `predict(traces)[n][t]` is the prediction made at position `t` of trace
/// `n`, i.e. for the payload of token `t + 1`.
pub trait Predictor: Sync {
    fn name(&self) -> &str;
    fn predict(&self, traces: &[InterleavedTrace]) -> Vec<Vec<State>>;
}

/// Always predicts the prior mean.
pub struct ZeroPredictor;

impl Predictor for ZeroPredictor {
    fn name(&self) -> &str {
        "zero"
    }

    fn predict(&self, traces: &[InterleavedTrace]) -> Vec<Vec<State>> {
        traces.iter().map(|t| vec![[0.0; STATE_DIM]; t.len()]).collect()
    }
}

/// A trained transformer, run in f32.
pub struct ModelPredictor<'a> {
    pub model: &'a Transformer<f32>,
    pub micro_batch: usize,
}

impl Predictor for ModelPredictor<'_> {
    fn name(&self) -> &str {
        "model"
    }

    fn predict(&self, traces: &[InterleavedTrace]) -> Vec<Vec<State>> {
        let encoded: Vec<_> = traces.iter().map(InterleavedTrace::encode).collect();
        forward(self.model, &encoded, self.micro_batch)
            .into_iter()
            .map(|y| {
                y.data
                    .chunks_exact(STATE_DIM)
                    .map(|r| std::array::from_fn(|j| r[j] as f64))
                    .collect()
            })
            .collect()
    }
}

/// Least-squares predictors that use the labels: every observation is filed
/// under the label pair of its segment, and a prediction inside a segment uses
/// the whole history filed under that pair so far. Outside any segment the
/// prediction is zero.
///
/// With `exact` set, histories of six or more states are solved exactly
/// (`Û` from the first six states) instead of by pseudoinverse.
pub struct LabelRecall {
    exact: bool,
}

impl LabelRecall {
    /// The pseudoinverse baseline.
    pub fn pseudoinverse() -> Self {
        Self { exact: false }
    }

    /// Noise-free recall ceiling: replays the dynamics identified from the
    /// haystack onto the latest state of the labelled system.
    pub fn perfect_recall() -> Self {
        Self { exact: true }
    }

    fn predict_one(&self, history: &[State]) -> State {
        if self.exact && history.len() > STATE_DIM {
            if let Ok(u) = exact_solve(history) {
                return u.apply(history.last().expect("non-empty"));
            }
        }
        pinv_predict(history)
    }

    fn predict_trace(&self, trace: &InterleavedTrace) -> Vec<State> {
        let mut memory: Vec<Vec<State>> = vec![Vec::new(); 256];
        let mut current: Option<usize> = None;
        let mut out = Vec::with_capacity(trace.len());
        for (kind, x) in trace.kinds.iter().zip(&trace.payloads) {
            match kind {
                TokenKind::Start | TokenKind::Close(_) => current = None,
                TokenKind::Open(p) => current = Some(*p as usize),
                TokenKind::Obs(_) => {
                    if let Some(p) = current {
                        memory[p].push(*x);
                    }
                }
            }
            out.push(match current {
                Some(p) => self.predict_one(&memory[p]),
                None => [0.0; STATE_DIM],
            });
        }
        out
    }
}

impl Predictor for LabelRecall {
    fn name(&self) -> &str {
        if self.exact {
            "perfect_recall"
        } else {
            "pinv"
        }
    }

    fn predict(&self, traces: &[InterleavedTrace]) -> Vec<Vec<State>> {
        #[cfg(feature = "parallel")]
        {
            use rayon::prelude::*;
            traces.par_iter().map(|t| self.predict_trace(t)).collect()
        }
        #[cfg(not(feature = "parallel"))]
        {
            traces.iter().map(|t| self.predict_trace(t)).collect()
        }
    }
}
