use crate::datagen::EncodedTrace;
use crate::model::{batch_tokens, ParamVars, Transformer, B_IN, POS, W_IN};
use crate::nn::{Scalar, Tape, Tensor, Var};

use super::graph::{EdgeGraph, EmbedMode, NodeId};

/// Gated forward pass on `tape`: every reader's input is the gate-weighted sum
/// of the writers before it. `gates` is a `1 × |edges|` node.
///
/// With `subtract = Some(e)` the reader of edge `e` instead receives its gated
/// sum minus the writer's output, which is how a single ablation is
/// cross-checked.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gated_forward_tape<S: Scalar>(
    tape: &mut Tape<S>,
    model: &Transformer<S>,
    pv: &ParamVars,
    graph: &EdgeGraph,
    tokens: Tensor<S>,
    batch: usize,
    seq: usize,
    gates: Var,
    subtract: Option<usize>,
) -> Var {
    let cfg = &model.config;
    assert_eq!(graph.spec.n_layers, cfg.n_layers);
    assert_eq!(graph.spec.n_heads, cfg.n_heads);
    let (d, dh, nh) = (cfg.d_model, cfg.d_head, cfg.n_heads);
    let x = tape.constant(tokens);
    let tok = tape.linear(x, pv.get(W_IN), pv.get(B_IN));
    let mut writers: Vec<Var> = match graph.spec.embed {
        EmbedMode::Single => vec![tape.add_positional(tok, pv.get(POS), seq)],
        EmbedMode::Split => {
            let zeros = tape.constant(Tensor::zeros(batch * seq, d));
            vec![tok, tape.add_positional(zeros, pv.get(POS), seq)]
        }
    };
    let read = |tape: &mut Tape<S>, writers: &[Var], reader: NodeId| -> Var {
        let (first, n) = graph.reader_block(reader);
        debug_assert!(n <= writers.len());
        let idx = (first..first + n).map(Some).collect();
        let sum = tape.gated_sum(writers[..n].to_vec(), gates, idx);
        match subtract {
            Some(e) if (first..first + n).contains(&e) => {
                let w = tape.scale(writers[e - first], S::lit(-1.0));
                tape.add(sum, w)
            }
            _ => sum,
        }
    };
    let head_bias = S::lit(1.0 / nh as f64);
    for l in 0..cfg.n_layers {
        let li = model.layer(l);
        let mut outs = Vec::with_capacity(nh + 1);
        for h in 0..nh {
            let proj = |tape: &mut Tape<S>, reader: NodeId, block: usize| {
                let r = read(tape, &writers, reader);
                let a = tape.layer_norm(r, pv.get(li.ln1_g), pv.get(li.ln1_b));
                let w = tape.col_slice(pv.get(li.w_qkv), block * d + h * dh, dh);
                let b = tape.col_slice(pv.get(li.b_qkv), block * d + h * dh, dh);
                tape.linear(a, w, b)
            };
            let q = proj(tape, NodeId::AttnQ(l, h), 0);
            let k = proj(tape, NodeId::AttnK(l, h), 1);
            let v = proj(tape, NodeId::AttnV(l, h), 2);
            let z = tape.causal_attention(q, k, v, batch, seq, 1);
            let wo = tape.row_slice(pv.get(li.w_o), h * dh, dh);
            let bo = tape.scale(pv.get(li.b_o), head_bias);
            outs.push(tape.linear(z, wo, bo));
        }
        writers.extend(outs);
        let r = read(tape, &writers, NodeId::Mlp(l));
        let m = tape.layer_norm(r, pv.get(li.ln2_g), pv.get(li.ln2_b));
        let m = tape.linear(m, pv.get(li.w_fc), pv.get(li.b_fc));
        let m = tape.gelu(m);
        writers.push(tape.linear(m, pv.get(li.w_proj), pv.get(li.b_proj)));
    }
    let r = read(tape, &writers, NodeId::ResidPost);
    let hi = model.head();
    let f = tape.layer_norm(r, pv.get(hi.lnf_g), pv.get(hi.lnf_b));
    tape.linear(f, pv.get(hi.w_out), pv.get(hi.b_out))
}

/// Inference with fixed gate values. Traces are processed in chunks of
/// `micro_batch`; each chunk must share one length.
pub fn gated_forward<S: Scalar>(
    model: &Transformer<S>,
    graph: &EdgeGraph,
    traces: &[&EncodedTrace],
    gates: &[S],
    micro_batch: usize,
) -> Vec<Tensor<S>> {
    run_chunks(model, graph, traces, gates, None, micro_batch)
}

pub(crate) fn run_chunks<S: Scalar>(
    model: &Transformer<S>,
    graph: &EdgeGraph,
    traces: &[&EncodedTrace],
    gates: &[S],
    subtract: Option<usize>,
    micro_batch: usize,
) -> Vec<Tensor<S>> {
    assert_eq!(gates.len(), graph.len());
    let out_dim = model.config.out_dim;
    let run = |chunk: &[&EncodedTrace]| -> Vec<Tensor<S>> {
        let seq = chunk[0].len;
        let (tokens, _, _) = batch_tokens::<S>(chunk);
        let mut tape = Tape::new();
        let pv = ParamVars::load(&mut tape, model, false);
        let g = tape.constant(Tensor::from_vec(1, gates.len(), gates.to_vec()));
        let y = gated_forward_tape(&mut tape, model, &pv, graph, tokens, chunk.len(), seq, g, subtract);
        let y = tape.value(y);
        y.data
            .chunks_exact(seq * out_dim)
            .map(|rows| Tensor::from_vec(seq, out_dim, rows.to_vec()))
            .collect()
    };
    let chunks: Vec<&[&EncodedTrace]> = traces.chunks(micro_batch.max(1)).collect();
    #[cfg(feature = "parallel")]
    let parts: Vec<Vec<Tensor<S>>> = {
        use rayon::prelude::*;
        chunks.par_iter().map(|c| run(c)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<Vec<Tensor<S>>> = chunks.iter().map(|c| run(c)).collect();
    parts.into_iter().flatten().collect()
}
