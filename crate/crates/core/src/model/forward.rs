use crate::datagen::EncodedTrace;
use crate::dynsys::STATE_DIM;
use crate::nn::{Scalar, Tape, Tensor, Var};

use super::Transformer;

/// Tape handles for every parameter tensor, in storage order.
#[derive(Clone, Debug)]
pub struct ParamVars(pub Vec<Var>);

impl ParamVars {
    pub fn load<S: Scalar>(tape: &mut Tape<S>, model: &Transformer<S>, trainable: bool) -> Self {
        Self(
            model
                .tensors
                .iter()
                .map(|t| tape.leaf(t.clone(), trainable))
                .collect(),
        )
    }

    pub fn get(&self, idx: usize) -> Var {
        self.0[idx]
    }
}

/// Stack equal-length traces into a `(batch·seq) × 57` input, plus flattened
/// targets and mask.
pub fn batch_tokens<S: Scalar>(traces: &[&EncodedTrace]) -> (Tensor<S>, Vec<S>, Vec<bool>) {
    assert!(!traces.is_empty(), "empty batch");
    let seq = traces[0].len;
    assert!(traces.iter().all(|t| t.len == seq), "batch traces differ in length");
    let dim = traces[0].tokens.len() / seq;
    let mut tokens = Vec::with_capacity(traces.len() * seq * dim);
    let mut targets = Vec::with_capacity(traces.len() * seq * STATE_DIM);
    let mut mask = Vec::with_capacity(traces.len() * seq);
    for t in traces {
        tokens.extend(t.tokens.iter().map(|v| S::lit(*v as f64)));
        targets.extend(t.targets.iter().map(|v| S::lit(*v as f64)));
        mask.extend_from_slice(&t.loss_mask);
    }
    (Tensor::from_vec(traces.len() * seq, dim, tokens), targets, mask)
}

/// Record the full forward pass on `tape`; returns the `(batch·seq) × 5`
/// prediction node.
pub fn forward_tape<S: Scalar>(
    tape: &mut Tape<S>,
    model: &Transformer<S>,
    pv: &ParamVars,
    tokens: Tensor<S>,
    batch: usize,
    seq: usize,
) -> Var {
    let cfg = &model.config;
    let d = cfg.d_model;
    let x = tape.constant(tokens);
    let h = tape.linear(x, pv.get(super::W_IN), pv.get(super::B_IN));
    let mut resid = tape.add_positional(h, pv.get(super::POS), seq);
    for l in 0..cfg.n_layers {
        let li = model.layer(l);
        let a = tape.layer_norm(resid, pv.get(li.ln1_g), pv.get(li.ln1_b));
        let qkv = tape.linear(a, pv.get(li.w_qkv), pv.get(li.b_qkv));
        let q = tape.col_slice(qkv, 0, d);
        let k = tape.col_slice(qkv, d, d);
        let v = tape.col_slice(qkv, 2 * d, d);
        let z = tape.causal_attention(q, k, v, batch, seq, cfg.n_heads);
        let o = tape.linear(z, pv.get(li.w_o), pv.get(li.b_o));
        resid = tape.add(resid, o);
        let m = tape.layer_norm(resid, pv.get(li.ln2_g), pv.get(li.ln2_b));
        let m = tape.linear(m, pv.get(li.w_fc), pv.get(li.b_fc));
        let m = tape.gelu(m);
        let m = tape.linear(m, pv.get(li.w_proj), pv.get(li.b_proj));
        resid = tape.add(resid, m);
    }
    let hi = model.head();
    let f = tape.layer_norm(resid, pv.get(hi.lnf_g), pv.get(hi.lnf_b));
    tape.linear(f, pv.get(hi.w_out), pv.get(hi.b_out))
}

/// Inference over traces of any lengths. Returns one `len × 5` prediction
/// tensor per trace; traces are grouped into chunks of at most `micro_batch`
/// equal-length traces.
pub fn forward<S: Scalar>(model: &Transformer<S>, traces: &[EncodedTrace], micro_batch: usize) -> Vec<Tensor<S>> {
    let micro_batch = micro_batch.max(1);
    let mut order: Vec<usize> = (0..traces.len()).collect();
    order.sort_by_key(|&i| traces[i].len);
    let mut chunks: Vec<Vec<usize>> = Vec::new();
    for i in order {
        match chunks.last_mut() {
            Some(c) if c.len() < micro_batch && traces[c[0]].len == traces[i].len => c.push(i),
            _ => chunks.push(vec![i]),
        }
    }
    let run = |chunk: &Vec<usize>| -> Vec<(usize, Tensor<S>)> {
        let refs: Vec<&EncodedTrace> = chunk.iter().map(|&i| &traces[i]).collect();
        let seq = refs[0].len;
        let (tokens, _, _) = batch_tokens::<S>(&refs);
        let mut tape = Tape::new();
        let pv = ParamVars::load(&mut tape, model, false);
        let y = forward_tape(&mut tape, model, &pv, tokens, refs.len(), seq);
        let out = tape.value(y);
        chunk
            .iter()
            .enumerate()
            .map(|(b, &i)| {
                let rows = out.data[b * seq * STATE_DIM..(b + 1) * seq * STATE_DIM].to_vec();
                (i, Tensor::from_vec(seq, STATE_DIM, rows))
            })
            .collect()
    };
    #[cfg(feature = "parallel")]
    let parts: Vec<Vec<(usize, Tensor<S>)>> = {
        use rayon::prelude::*;
        chunks.par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<Vec<(usize, Tensor<S>)>> = chunks.iter().map(run).collect();
    let mut out: Vec<Option<Tensor<S>>> = vec![None; traces.len()];
    for (i, t) in parts.into_iter().flatten() {
        out[i] = Some(t);
    }
    out.into_iter().map(|t| t.expect("every trace predicted")).collect()
}
