//! Edge pruning. Each residual-stream reader gets its own copy of the stream,
//! written as a gated sum over the writers before it; gates are trained, cut
//! to a target sparsity and the surviving edges form a circuit.

mod export;
mod forward;
mod gates;
mod graph;

pub use export::{export_circuit, parse_circuit};
pub use forward::gated_forward;
pub use gates::{
    eval_circuit, overlap, quantize, sweep_k, train_gates, Circuit, EdgeGateSet, GateLog, GateTrainConfig, Overlap,
    Task, TaskData, DEFAULT_K_SCALE, DEFAULT_SPARSITY, HC_BETA, HC_GAMMA, HC_ZETA, K_SWEEP, THRESHOLD_PRECISION,
};
pub use graph::{disentangle, edge_count_formula, Edge, EdgeGraph, EmbedMode, GraphSpec, NodeId};
