use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::EncodedTrace;
use crate::dynsys::{State, STATE_DIM};
use crate::error::CircuitError;
use crate::evalsuite::NeedleDataset;
use crate::model::{batch_tokens, ParamVars, Transformer};
use crate::nn::{Tape, Tensor};

use super::forward::{gated_forward, gated_forward_tape};
use super::graph::{Edge, EdgeGraph, GraphSpec};

/// Which prediction after the query label a circuit is trained on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    OneAfter,
    TwoAfter,
}

impl Task {
    /// Offset of the prediction site from the query open label.
    pub fn offset(self) -> usize {
        match self {
            Task::OneAfter => 0,
            Task::TwoAfter => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::OneAfter => "one_after",
            Task::TwoAfter => "two_after",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "one_after" => Ok(Task::OneAfter),
            "two_after" => Ok(Task::TwoAfter),
            other => Err(format!("unknown task {other:?}")),
        }
    }
}

/// Encoded needle traces plus the two sites gates are trained and scored on.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub traces: Vec<EncodedTrace>,
    /// Row of the query open label.
    pub site: usize,
    /// `targets[n][j]`: the observation predicted at `site + j`.
    pub targets: Vec<[State; 2]>,
}

impl TaskData {
    pub fn from_needle(ds: &NeedleDataset) -> Result<Self, CircuitError> {
        let site = ds
            .meta
            .layout
            .final_open
            .ok_or_else(|| CircuitError::TaskData("dataset has no query label".into()))?;
        let traces = ds.traces.iter().map(|t| t.encode()).collect();
        let targets = ds
            .traces
            .iter()
            .map(|t| [t.payloads[site + 1], t.payloads[site + 2]])
            .collect();
        Ok(Self { traces, site, targets })
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    /// Mean `‖x‖²` of the targets at both sites: the zero predictor's error.
    pub fn zero_mse(&self) -> (f64, f64) {
        let n = self.len().max(1) as f64;
        let norm = |x: &State| x.iter().map(|v| v * v).sum::<f64>();
        let a = self.targets.iter().map(|t| norm(&t[0])).sum::<f64>() / n;
        let b = self.targets.iter().map(|t| norm(&t[1])).sum::<f64>() / n;
        (a, b)
    }
}

/// Hard-concrete constants: temperature, stretch interval.
pub const HC_BETA: f64 = 2.0 / 3.0;
pub const HC_GAMMA: f64 = -0.1;
pub const HC_ZETA: f64 = 1.1;

pub const DEFAULT_K_SCALE: f64 = 100.0;
pub const DEFAULT_SPARSITY: f64 = 0.98;
pub const K_SWEEP: [f64; 4] = [1.0, 10.0, 100.0, 1000.0];

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GateTrainConfig {
    pub k_scale: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Final weight of the edge penalty.
    pub edge_weight: f64,
    /// `s`: fraction of the run over which the penalty weight ramps from 0.
    pub anneal: f64,
    pub init_log_alpha: f64,
    pub seed: u64,
}

impl Default for GateTrainConfig {
    fn default() -> Self {
        Self {
            k_scale: DEFAULT_K_SCALE,
            steps: 400,
            batch_size: 16,
            learning_rate: 0.1,
            edge_weight: 1.0,
            anneal: 0.5,
            init_log_alpha: 3.0,
            seed: 0,
        }
    }
}

impl GateTrainConfig {
    fn penalty_weight(&self, step: usize) -> f64 {
        let ramp = self.anneal * self.steps as f64;
        if ramp <= 0.0 {
            self.edge_weight
        } else {
            self.edge_weight * (step as f64 / ramp).min(1.0)
        }
    }
}

/// Trained gate logits, one per edge in graph order.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EdgeGateSet {
    pub spec: GraphSpec,
    pub task: Task,
    pub k_scale: f64,
    pub sparsity_target: f64,
    pub log_alpha: Vec<f64>,
}

impl EdgeGateSet {
    pub fn open(graph: &EdgeGraph, task: Task, k_scale: f64, log_alpha: f64) -> Self {
        Self {
            spec: graph.spec,
            task,
            k_scale,
            sparsity_target: DEFAULT_SPARSITY,
            log_alpha: vec![log_alpha; graph.len()],
        }
    }

    /// Gate scores `σ(log α)` in `[0, 1]`; these are what quantization
    /// thresholds.
    pub fn gate_values(&self) -> Vec<f64> {
        self.log_alpha.iter().map(|&a| sigmoid(a)).collect()
    }

    /// Noise-free hard-concrete gates, clamped to `[0, 1]`.
    pub fn deterministic(&self) -> Vec<f64> {
        self.log_alpha
            .iter()
            .map(|&a| (sigmoid(a) * (HC_ZETA - HC_GAMMA) + HC_GAMMA).clamp(0.0, 1.0))
            .collect()
    }

    /// Fraction of edges whose noise-free gate is nonzero.
    pub fn kept_fraction(&self) -> f64 {
        let d = self.deterministic();
        d.iter().filter(|&&z| z > 0.0).count() as f64 / d.len().max(1) as f64
    }

    /// Mean probability that a sampled gate is nonzero.
    pub fn expected_density(&self) -> f64 {
        let shift = HC_BETA * (-HC_GAMMA / HC_ZETA).ln();
        self.log_alpha.iter().map(|&a| sigmoid(a - shift)).sum::<f64>() / self.log_alpha.len().max(1) as f64
    }

    /// Circuit of every edge whose noise-free gate is nonzero.
    pub fn active_circuit(&self, graph: &EdgeGraph) -> Circuit {
        let d = self.deterministic();
        let kept = graph
            .edges()
            .iter()
            .zip(&d)
            .filter(|(_, &z)| z > 0.0)
            .map(|(e, _)| *e)
            .collect();
        Circuit {
            spec: self.spec,
            n_edges_total: graph.len(),
            task: self.task,
            k_scale: self.k_scale,
            threshold: None,
            kept_edges: kept,
            eval_mse: None,
        }
    }
}

/// One hard-concrete sample per edge and `∂z/∂log α`.
fn sample_gates(log_alpha: &[f64], rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    log_alpha
        .iter()
        .map(|&a| {
            let u: f64 = rng.gen_range(1e-6..1.0 - 1e-6);
            let s = sigmoid(((u / (1.0 - u)).ln() + a) / HC_BETA);
            let stretched = s * (HC_ZETA - HC_GAMMA) + HC_GAMMA;
            let grad = if stretched > 0.0 && stretched < 1.0 {
                (HC_ZETA - HC_GAMMA) * s * (1.0 - s) / HC_BETA
            } else {
                0.0
            };
            (stretched.clamp(0.0, 1.0), grad)
        })
        .unzip()
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct GateLog {
    pub step: usize,
    pub mse: f64,
    pub density: f64,
    pub loss: f64,
}

/// Optimize edge gates on `L' = k·MSE + λ(step)·density`, where MSE is taken
/// at the task's site only and `density` is the expected fraction of open
/// edges. `λ` ramps linearly to `edge_weight` over the first `anneal` of the
/// run. Model weights are read, never written.
pub fn train_gates(
    model: &Transformer<f32>,
    graph: &EdgeGraph,
    data: &TaskData,
    task: Task,
    cfg: &GateTrainConfig,
) -> Result<(EdgeGateSet, Vec<GateLog>), CircuitError> {
    if data.is_empty() {
        return Err(CircuitError::TaskData("no traces".into()));
    }
    let mut gates = EdgeGateSet::open(graph, task, cfg.k_scale, cfg.init_log_alpha);
    let n = graph.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut m, mut v) = (vec![0.0f64; n], vec![0.0f64; n]);
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let shift = HC_BETA * (-HC_GAMMA / HC_ZETA).ln();
    let site = data.site + task.offset();
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<usize> = (0..cfg.batch_size.max(1)).map(|_| rng.gen_range(0..data.len())).collect();
        let refs: Vec<&EncodedTrace> = batch.iter().map(|&i| &data.traces[i]).collect();
        let seq = refs[0].len;
        let (tokens, _, _) = batch_tokens::<f32>(&refs);
        let mut targets = vec![0.0f32; refs.len() * seq * STATE_DIM];
        let mut mask = vec![false; refs.len() * seq];
        for (b, &i) in batch.iter().enumerate() {
            let row = b * seq + site;
            mask[row] = true;
            for (j, x) in data.targets[i][task.offset()].iter().enumerate() {
                targets[row * STATE_DIM + j] = *x as f32;
            }
        }
        let (z, dz) = sample_gates(&gates.log_alpha, &mut rng);

        let mut tape = Tape::new();
        let pv = ParamVars::load(&mut tape, model, false);
        let gv = tape.param(Tensor::from_vec(1, n, z.iter().map(|&x| x as f32).collect()));
        let y = gated_forward_tape(&mut tape, model, &pv, graph, tokens, refs.len(), seq, gv, None);
        let sse = tape.masked_sse(y, targets, mask, 1.0 / refs.len() as f32);
        let mse = tape.value(sse).data[0] as f64;
        let g_z = if cfg.k_scale != 0.0 {
            let grads = tape.backward(sse);
            grads.get(gv).map(|g| g.data.clone()).unwrap_or_else(|| vec![0.0; n])
        } else {
            vec![0.0; n]
        };

        let lambda = cfg.penalty_weight(step);
        let density = gates.expected_density();
        let loss = cfg.k_scale * mse + lambda * density;
        if !loss.is_finite() {
            return Err(CircuitError::Diverged { step, loss });
        }
        log.push(GateLog {
            step,
            mse,
            density,
            loss,
        });
        let t = (step + 1) as i32;
        for i in 0..n {
            let p = sigmoid(gates.log_alpha[i] - shift);
            let g = cfg.k_scale * g_z[i] as f64 * dz[i] + lambda * p * (1.0 - p) / n as f64;
            if !g.is_finite() {
                return Err(CircuitError::Diverged { step, loss: g });
            }
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let mh = m[i] / (1.0 - b1.powi(t));
            let vh = v[i] / (1.0 - b2.powi(t));
            gates.log_alpha[i] -= cfg.learning_rate * mh / (vh.sqrt() + eps);
        }
    }
    Ok((gates, log))
}

/// A binary edge selection.
#[derive(Clone, Debug, PartialEq)]
pub struct Circuit {
    pub spec: GraphSpec,
    pub n_edges_total: usize,
    pub task: Task,
    pub k_scale: f64,
    /// Threshold the circuit was cut at, if it came from quantization.
    pub threshold: Option<f64>,
    pub kept_edges: BTreeSet<Edge>,
    /// `(one_after, two_after)` after hard masking.
    pub eval_mse: Option<(f64, f64)>,
}

impl Circuit {
    pub fn sparsity(&self) -> f64 {
        1.0 - self.kept_edges.len() as f64 / self.n_edges_total.max(1) as f64
    }

    /// Hard 0/1 gate vector in graph order.
    pub fn mask(&self, graph: &EdgeGraph) -> Result<Vec<f32>, CircuitError> {
        if graph.spec != self.spec || graph.len() != self.n_edges_total {
            return Err(CircuitError::GraphMismatch);
        }
        let mut out = vec![0.0f32; graph.len()];
        for e in &self.kept_edges {
            out[graph.edge_index(e).ok_or(CircuitError::GraphMismatch)?] = 1.0;
        }
        Ok(out)
    }

    pub fn full(graph: &EdgeGraph, task: Task) -> Self {
        Self {
            spec: graph.spec,
            n_edges_total: graph.len(),
            task,
            k_scale: 0.0,
            threshold: None,
            kept_edges: graph.edges().iter().copied().collect(),
            eval_mse: None,
        }
    }

    pub fn empty(graph: &EdgeGraph, task: Task) -> Self {
        Self {
            kept_edges: BTreeSet::new(),
            ..Self::full(graph, task)
        }
    }
}

fn kept_at(scores: &[f64], tau: f64) -> usize {
    scores.iter().filter(|&&s| s >= tau).count()
}

/// Precision of the threshold search.
pub const THRESHOLD_PRECISION: f64 = 1e-5;

/// Threshold the gate scores so the sparsity lands as close to `target` as
/// the scores allow. Edges scoring at or above `τ` are kept.
///
/// Bisection over `τ ∈ [0, 1]` stops once the bracket is narrower than
/// [`THRESHOLD_PRECISION`]; `hi` is then the smallest threshold found that
/// reaches the target and `lo` the largest that does not. The closer of the
/// two wins; on a tie, the sparser `hi`. When every score is equal the
/// bracket straddles that score, so the circuit keeps either every edge or
/// none, whichever sparsity is nearer the target.
pub fn quantize(gates: &EdgeGateSet, graph: &EdgeGraph, target: f64) -> Circuit {
    let scores = gates.gate_values();
    let n = scores.len().max(1) as f64;
    let sparsity = |tau: f64| 1.0 - kept_at(&scores, tau) as f64 / n;
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    let tau = if sparsity(lo) >= target {
        lo
    } else if sparsity(hi) < target {
        hi
    } else {
        while hi - lo > THRESHOLD_PRECISION {
            let mid = 0.5 * (lo + hi);
            if sparsity(mid) >= target {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        if (sparsity(lo) - target).abs() < (sparsity(hi) - target).abs() {
            lo
        } else {
            hi
        }
    };
    let kept = graph
        .edges()
        .iter()
        .zip(&scores)
        .filter(|(_, &s)| s >= tau)
        .map(|(e, _)| *e)
        .collect();
    Circuit {
        spec: gates.spec,
        n_edges_total: graph.len(),
        task: gates.task,
        k_scale: gates.k_scale,
        threshold: Some(tau),
        kept_edges: kept,
        eval_mse: None,
    }
}

/// Hard-masked MSE at the one-after and two-after sites, averaged over
/// traces.
pub fn eval_circuit(
    model: &Transformer<f32>,
    graph: &EdgeGraph,
    circuit: &Circuit,
    data: &TaskData,
    micro_batch: usize,
) -> Result<(f64, f64), CircuitError> {
    let mask = circuit.mask(graph)?;
    let refs: Vec<&EncodedTrace> = data.traces.iter().collect();
    let out = gated_forward(model, graph, &refs, &mask, micro_batch);
    let mut acc = [0.0f64; 2];
    for (y, t) in out.iter().zip(&data.targets) {
        for (j, a) in acc.iter_mut().enumerate() {
            *a += y
                .row(data.site + j)
                .iter()
                .zip(&t[j])
                .map(|(p, x)| (*p as f64 - x).powi(2))
                .sum::<f64>();
        }
    }
    let n = data.len().max(1) as f64;
    Ok((acc[0] / n, acc[1] / n))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    pub shared: usize,
    /// `|A ∩ B| / |A ∪ B|`; two empty circuits count as identical.
    pub jaccard: f64,
}

pub fn overlap(a: &Circuit, b: &Circuit) -> Result<Overlap, CircuitError> {
    if a.spec != b.spec || a.n_edges_total != b.n_edges_total {
        return Err(CircuitError::GraphMismatch);
    }
    let shared = a.kept_edges.intersection(&b.kept_edges).count();
    let union = a.kept_edges.len() + b.kept_edges.len() - shared;
    let jaccard = if union == 0 { 1.0 } else { shared as f64 / union as f64 };
    Ok(Overlap { shared, jaccard })
}

/// Train, quantize and score one circuit per `k`.
pub fn sweep_k(
    model: &Transformer<f32>,
    graph: &EdgeGraph,
    data: &TaskData,
    task: Task,
    cfg: &GateTrainConfig,
    ks: &[f64],
    target: f64,
) -> Result<Vec<Circuit>, CircuitError> {
    ks.iter()
        .map(|&k| {
            let (gates, _) = train_gates(model, graph, data, task, &GateTrainConfig { k_scale: k, ..cfg.clone() })?;
            let mut c = quantize(&gates, graph, target);
            c.eval_mse = Some(eval_circuit(model, graph, &c, data, 16)?);
            Ok(c)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuits::graph::{EmbedMode, NodeId};
    use proptest::prelude::{prop_assert, proptest};

    fn graph() -> EdgeGraph {
        EdgeGraph::new(GraphSpec {
            n_layers: 3,
            n_heads: 6,
            embed: EmbedMode::Single,
        })
    }

    fn gates_from(g: &EdgeGraph, la: Vec<f64>) -> EdgeGateSet {
        EdgeGateSet {
            log_alpha: la,
            ..EdgeGateSet::open(g, Task::OneAfter, 100.0, 0.0)
        }
    }

    #[test]
    fn quantize_hits_target() {
        let g = graph();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gs = gates_from(&g, (0..g.len()).map(|_| rng.gen_range(-6.0..6.0)).collect());
        let c = quantize(&gs, &g, 0.98);
        assert!((c.sparsity() - 0.98).abs() <= 0.005, "{}", c.sparsity());
        assert_eq!(quantize(&gs, &g, 0.98), c);
    }

    #[test]
    fn quantize_ties_are_all_or_none() {
        let g = graph();
        let gs = gates_from(&g, vec![0.3; g.len()]);
        assert!(quantize(&gs, &g, 0.98).kept_edges.is_empty());
        assert_eq!(quantize(&gs, &g, 0.2).kept_edges.len(), g.len());
        assert_eq!(quantize(&gs, &g, 0.0).kept_edges.len(), g.len());
    }

    #[test]
    fn overlap_by_hand() {
        let g = graph();
        let e: Vec<Edge> = g.edges()[..3].to_vec();
        let mk = |set: &[Edge]| Circuit {
            kept_edges: set.iter().copied().collect(),
            ..Circuit::empty(&g, Task::OneAfter)
        };
        let o = overlap(&mk(&e[..2]), &mk(&e[1..])).unwrap();
        assert_eq!(o.shared, 1);
        assert!((o.jaccard - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(overlap(&mk(&e[..1]), &mk(&e[2..])).unwrap(), Overlap { shared: 0, jaccard: 0.0 });
        assert_eq!(overlap(&mk(&e), &mk(&e)).unwrap().jaccard, 1.0);
        let other = EdgeGraph::new(GraphSpec {
            n_layers: 2,
            n_heads: 6,
            embed: EmbedMode::Single,
        });
        assert!(matches!(
            overlap(&mk(&e), &Circuit::empty(&other, Task::OneAfter)),
            Err(CircuitError::GraphMismatch)
        ));
    }

    #[test]
    fn mask_respects_membership() {
        let g = graph();
        let e = Edge {
            src: NodeId::Embed,
            dst: NodeId::ResidPost,
        };
        let c = Circuit {
            kept_edges: [e].into_iter().collect(),
            ..Circuit::empty(&g, Task::TwoAfter)
        };
        let m = c.mask(&g).unwrap();
        assert_eq!(m.iter().filter(|&&v| v == 1.0).count(), 1);
        assert_eq!(m[g.edge_index(&e).unwrap()], 1.0);
    }

    #[test]
    fn hard_concrete_sample_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let la: Vec<f64> = (-20..20).map(|i| i as f64 * 0.5).collect();
        let (z, dz) = sample_gates(&la, &mut rng);
        assert!(z.iter().all(|v| (0.0..=1.0).contains(v)));
        for (zi, di) in z.iter().zip(&dz) {
            if *zi == 0.0 || *zi == 1.0 {
                assert_eq!(*di, 0.0);
            }
        }
    }

    proptest! {
        #[test]
        fn kept_count_is_monotone(seed in 0u64..500, a in 0.0f64..1.0, b in 0.0f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scores: Vec<f64> = (0..200).map(|_| rng.gen()).collect();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(kept_at(&scores, hi) <= kept_at(&scores, lo));
        }
    }
}
