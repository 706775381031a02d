//! Reverse-mode autodiff over dense row-major matrices.
//!
//! A [`Tape`] records each operation with its forward value. `backward`
//! walks the record in reverse and returns one gradient per node that
//! depends on a differentiable leaf.

use super::attention::{
    combine_cols, combine_rows, lane_dot, load_cols, load_rows, lower_scores, padded, softmax_row, store_rows,
    HeadScratch,
};
use super::tensor::{gemm_into, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    /// `x·w + b`, bias broadcast over rows.
    Linear(Var, Var, Var),
    /// `x + bias`, bias broadcast over rows.
    AddRow(Var, Var),
    Add(Var, Var),
    Scale(Var, S),
    /// `x[b·seq + t] += pos[t]`.
    AddPositional {
        x: Var,
        pos: Var,
        seq: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        rstd: Vec<S>,
    },
    Gelu(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: Vec<S>,
    },
    ColSlice {
        x: Var,
        start: usize,
    },
    RowSlice {
        x: Var,
        start: usize,
    },
    /// `Σᵢ wᵢ·inputᵢ`, with `wᵢ = gates[idx]` or `1` when the term is ungated.
    GatedSum {
        inputs: Vec<Var>,
        gates: Var,
        gate_idx: Vec<Option<usize>>,
    },
    /// `scale · Σ_{masked rows} ‖pred − target‖²`, a 1×1 output.
    MaskedSse {
        pred: Var,
        target: Vec<S>,
        mask: Vec<bool>,
        scale: S,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    /// Drops the softmax Jacobian's centering term in attention backward.
    /// Only for negative-control gradient checks.
    pub corrupt_attention_grad: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-5;

fn gelu_parts<S: Scalar>(x: S) -> (S, S) {
    // tanh approximation
    let c = S::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = S::lit(0.044715);
    let half = S::lit(0.5);
    let one = S::one();
    let x3 = x * x * x;
    let inner = c * (x + a * x3);
    let t = inner.fast_tanh();
    let y = half * x * (one + t);
    let dinner = c * (one + S::lit(3.0) * a * x * x);
    let dy = half * (one + t) + half * x * (one - t * t) * dinner;
    (y, dy)
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            corrupt_attention_grad: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.cols, bv.rows, "matmul inner dims");
        let mut out = Tensor::zeros(av.rows, bv.cols);
        gemm_into(av, false, bv, false, S::one(), S::zero(), &mut out);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        assert_eq!(xv.cols, wv.rows, "linear inner dims");
        assert_eq!((bv.rows, bv.cols), (1, wv.cols), "bias shape");
        let mut out = Tensor::zeros(xv.rows, wv.cols);
        for r in 0..out.rows {
            out.row_mut(r).copy_from_slice(&bv.data);
        }
        gemm_into(xv, false, wv, false, S::one(), S::one(), &mut out);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(out, Op::Linear(x, w, b), rg)
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let (xv, bv) = (self.value(x), self.value(bias));
        assert_eq!((bv.rows, bv.cols), (1, xv.cols), "bias shape");
        let mut out = xv.clone();
        for r in 0..out.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&bv.data) {
                *o = *o + *b;
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        self.push(out, Op::AddRow(x, bias), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        let bv = self.value(b);
        assert_eq!((out.rows, out.cols), (bv.rows, bv.cols), "add shape");
        out.add_assign(bv);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn scale(&mut self, x: Var, s: S) -> Var {
        let mut out = self.value(x).clone();
        for v in &mut out.data {
            *v = *v * s;
        }
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn add_positional(&mut self, x: Var, pos: Var, seq: usize) -> Var {
        let (xv, pv) = (self.value(x), self.value(pos));
        assert!(pv.rows >= seq, "sequence longer than positional table");
        assert_eq!(xv.cols, pv.cols);
        assert_eq!(xv.rows % seq, 0);
        let mut out = xv.clone();
        for r in 0..out.rows {
            let t = r % seq;
            for (o, p) in out.row_mut(r).iter_mut().zip(pv.row(t)) {
                *o = *o + *p;
            }
        }
        let rg = self.rg(x) || self.rg(pos);
        self.push(out, Op::AddPositional { x, pos, seq }, rg)
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let d = xv.cols;
        let eps = S::lit(LN_EPS);
        let inv_d = S::lit(1.0 / d as f64);
        let mut out = Tensor::zeros(xv.rows, d);
        let mut xhat = vec![S::zero(); xv.rows * d];
        let mut rstd = vec![S::zero(); xv.rows];
        for r in 0..xv.rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<S>() * inv_d;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<S>() * inv_d;
            let rs = S::one() / (var + eps).sqrt();
            rstd[r] = rs;
            let xh = &mut xhat[r * d..(r + 1) * d];
            let o = out.row_mut(r);
            for j in 0..d {
                xh[j] = (row[j] - mean) * rs;
                o[j] = xh[j] * gv.data[j] + bv.data[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        )
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in &mut out.data {
            *v = gelu_parts(*v).0;
        }
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Causal multi-head attention. `q`, `k`, `v` are `(batch·seq) × (heads·d_head)`;
    /// head `h` owns columns `h·d_head..(h+1)·d_head`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let width = qv.cols;
        assert_eq!(qv.rows, batch * seq);
        assert_eq!((kv.rows, kv.cols), (qv.rows, width));
        assert_eq!((vv.rows, vv.cols), (qv.rows, width));
        assert_eq!(width % heads, 0);
        let dh = width / heads;
        let scale = S::lit(1.0 / (dh as f64).sqrt());
        let mut hs = HeadScratch::<S>::new(seq, dh);
        let d = hs.dims;
        let mut probs = vec![S::zero(); batch * heads * seq * d.sp];
        let mut out = Tensor::<S>::zeros(qv.rows, width);
        for b in 0..batch {
            for h in 0..heads {
                let base = b * seq * width + h * dh;
                load_rows(&qv.data[base..], width, seq, dh, d.dp, &mut hs.a);
                load_cols(&kv.data[base..], width, seq, dh, d.sp, &mut hs.bt);
                load_rows(&vv.data[base..], width, seq, dh, d.dp, &mut hs.b);
                let p = &mut probs[(b * heads + h) * seq * d.sp..(b * heads + h + 1) * seq * d.sp];
                lower_scores(&hs.a, &hs.bt, d, scale, p);
                for i in 0..seq {
                    softmax_row(&mut p[i * d.sp..(i + 1) * d.sp], i + 1);
                }
                combine_rows(p, &hs.b, d, &mut hs.o1);
                store_rows(&hs.o1, S::one(), d, width, &mut out.data[base..]);
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            },
            rg,
        )
    }

    pub fn col_slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.cols);
        let mut out = Tensor::zeros(xv.rows, len);
        for r in 0..xv.rows {
            out.row_mut(r).copy_from_slice(&xv.row(r)[start..start + len]);
        }
        let rg = self.rg(x);
        self.push(out, Op::ColSlice { x, start }, rg)
    }

    pub fn row_slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        assert!(start + len <= xv.rows);
        let out = Tensor::from_vec(len, xv.cols, xv.data[start * xv.cols..(start + len) * xv.cols].to_vec());
        let rg = self.rg(x);
        self.push(out, Op::RowSlice { x, start }, rg)
    }

    pub fn gated_sum(&mut self, inputs: Vec<Var>, gates: Var, gate_idx: Vec<Option<usize>>) -> Var {
        assert_eq!(inputs.len(), gate_idx.len());
        assert!(!inputs.is_empty(), "gated sum needs at least one input");
        let gv = &self.nodes[gates.0].value.data;
        let first = self.value(inputs[0]);
        let mut out = Tensor::zeros(first.rows, first.cols);
        for (inp, gi) in inputs.iter().zip(&gate_idx) {
            let w = gi.map_or(S::one(), |g| gv[g]);
            if w == S::zero() {
                continue;
            }
            let iv = &self.nodes[inp.0].value;
            assert_eq!(iv.data.len(), out.data.len());
            for (o, x) in out.data.iter_mut().zip(&iv.data) {
                *o = *o + w * *x;
            }
        }
        let rg = self.rg(gates) || inputs.iter().any(|v| self.rg(*v));
        self.push(
            out,
            Op::GatedSum {
                inputs,
                gates,
                gate_idx,
            },
            rg,
        )
    }

    /// `scale · Σ_{t: mask[t]} Σ_j (pred[t,j] − target[t,j])²`.
    pub fn masked_sse(&mut self, pred: Var, target: Vec<S>, mask: Vec<bool>, scale: S) -> Var {
        let pv = self.value(pred);
        assert_eq!(target.len(), pv.data.len());
        assert_eq!(mask.len(), pv.rows);
        let mut acc = S::zero();
        for (r, m) in mask.iter().enumerate() {
            if !*m {
                continue;
            }
            for (p, t) in pv.row(r).iter().zip(&target[r * pv.cols..(r + 1) * pv.cols]) {
                let d = *p - *t;
                acc = acc + d * d;
            }
        }
        let out = Tensor::from_vec(1, 1, vec![acc * scale]);
        let rg = self.rg(pred);
        self.push(
            out,
            Op::MaskedSse {
                pred,
                target,
                mask,
                scale,
            },
            rg,
        )
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients<S> {
        let lv = self.value(loss);
        assert_eq!(lv.len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(1, 1, S::one()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accum(&self, grads: &mut [Option<Tensor<S>>], v: Var, f: impl FnOnce(&mut Tensor<S>)) {
        if !self.rg(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            let val = &self.nodes[v.0].value;
            *slot = Some(Tensor::zeros(val.rows, val.cols));
        }
        f(slot.as_mut().expect("just initialized"));
    }

    /// Add `g` unchanged into `v`'s gradient, copying instead of zero-fill + add
    /// on first touch.
    fn pass(&self, grads: &mut [Option<Tensor<S>>], v: Var, g: &Tensor<S>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(g),
            slot => *slot = Some(g.clone()),
        }
    }

    fn col_sum(acc: &mut Tensor<S>, g: &Tensor<S>) {
        for r in 0..g.rows {
            for (o, v) in acc.data.iter_mut().zip(g.row(r)) {
                *o = *o + *v;
            }
        }
    }

    fn propagate(&self, node: &Node<S>, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accum(grads, *a, |ga| gemm_into(g, false, bv, true, S::one(), S::one(), ga));
                self.accum(grads, *b, |gb| gemm_into(av, true, g, false, S::one(), S::one(), gb));
            }
            Op::Linear(x, w, b) => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                self.accum(grads, *x, |gx| gemm_into(g, false, wv, true, S::one(), S::one(), gx));
                self.accum(grads, *w, |gw| gemm_into(xv, true, g, false, S::one(), S::one(), gw));
                self.accum(grads, *b, |gb| Self::col_sum(gb, g));
            }
            Op::AddRow(x, bias) => {
                self.pass(grads, *x, g);
                self.accum(grads, *bias, |gb| Self::col_sum(gb, g));
            }
            Op::Add(a, b) => {
                self.pass(grads, *a, g);
                self.pass(grads, *b, g);
            }
            Op::Scale(x, s) => {
                self.accum(grads, *x, |gx| {
                    for (o, v) in gx.data.iter_mut().zip(&g.data) {
                        *o = *o + *v * *s;
                    }
                });
            }
            Op::AddPositional { x, pos, seq } => {
                self.pass(grads, *x, g);
                self.accum(grads, *pos, |gp| {
                    for r in 0..g.rows {
                        let t = r % seq;
                        for (o, v) in gp.row_mut(t).iter_mut().zip(g.row(r)) {
                            *o = *o + *v;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = g.cols;
                let gv = self.value(*gamma);
                self.accum(grads, *gamma, |gg| {
                    for r in 0..g.rows {
                        let xh = &xhat[r * d..(r + 1) * d];
                        for ((o, gr), xv) in gg.data.iter_mut().zip(g.row(r)).zip(xh) {
                            *o = *o + *gr * *xv;
                        }
                    }
                });
                self.accum(grads, *beta, |gb| {
                    for r in 0..g.rows {
                        for (o, gr) in gb.data.iter_mut().zip(g.row(r)) {
                            *o = *o + *gr;
                        }
                    }
                });
                let inv_d = S::lit(1.0 / d as f64);
                self.accum(grads, *x, |gx| {
                    let mut dxh = vec![S::zero(); d];
                    for r in 0..g.rows {
                        let xh = &xhat[r * d..(r + 1) * d];
                        let gr = g.row(r);
                        let mut sum = S::zero();
                        let mut sum_x = S::zero();
                        for j in 0..d {
                            dxh[j] = gr[j] * gv.data[j];
                            sum = sum + dxh[j];
                            sum_x = sum_x + dxh[j] * xh[j];
                        }
                        let rs = rstd[r];
                        let out = gx.row_mut(r);
                        for j in 0..d {
                            out[j] = out[j] + rs * (dxh[j] - inv_d * sum - xh[j] * inv_d * sum_x);
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                self.accum(grads, *x, |gx| {
                    for ((o, gi), xi) in gx.data.iter_mut().zip(&g.data).zip(&xv.data) {
                        *o = *o + *gi * gelu_parts(*xi).1;
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                seq,
                heads,
                probs,
            } => self.attention_backward(g, *q, *k, *v, *batch, *seq, *heads, probs, grads),
            Op::ColSlice { x, start } => {
                self.accum(grads, *x, |gx| {
                    for r in 0..g.rows {
                        let dst = &mut gx.row_mut(r)[*start..*start + g.cols];
                        for (o, v) in dst.iter_mut().zip(g.row(r)) {
                            *o = *o + *v;
                        }
                    }
                });
            }
            Op::RowSlice { x, start } => {
                self.accum(grads, *x, |gx| {
                    let off = start * gx.cols;
                    for (o, v) in gx.data[off..off + g.data.len()].iter_mut().zip(&g.data) {
                        *o = *o + *v;
                    }
                });
            }
            Op::GatedSum {
                inputs,
                gates,
                gate_idx,
            } => {
                let gv = self.value(*gates).data.clone();
                for (inp, gi) in inputs.iter().zip(gate_idx) {
                    let w = gi.map_or(S::one(), |j| gv[j]);
                    if w != S::zero() {
                        self.accum(grads, *inp, |ga| {
                            for (o, v) in ga.data.iter_mut().zip(&g.data) {
                                *o = *o + w * *v;
                            }
                        });
                    }
                    if let Some(j) = gi {
                        let iv = self.value(*inp);
                        let dot = iv.data.iter().zip(&g.data).map(|(a, b)| *a * *b).sum::<S>();
                        self.accum(grads, *gates, |gg| gg.data[*j] = gg.data[*j] + dot);
                    }
                }
            }
            Op::MaskedSse {
                pred,
                target,
                mask,
                scale,
            } => {
                let pv = self.value(*pred);
                let up = g.data[0] * S::lit(2.0) * *scale;
                self.accum(grads, *pred, |gp| {
                    let c = pv.cols;
                    for (r, m) in mask.iter().enumerate() {
                        if !*m {
                            continue;
                        }
                        for j in 0..c {
                            let idx = r * c + j;
                            gp.data[idx] = gp.data[idx] + up * (pv.data[idx] - target[idx]);
                        }
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Tensor<S>,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        probs: &[S],
        grads: &mut [Option<Tensor<S>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let width = qv.cols;
        let dh = width / heads;
        let scale = S::lit(1.0 / (dh as f64).sqrt());
        let mut dq = Tensor::<S>::zeros(qv.rows, width);
        let mut dk = Tensor::<S>::zeros(qv.rows, width);
        let mut dv = Tensor::<S>::zeros(qv.rows, width);
        let mut hs = HeadScratch::<S>::new(seq, dh);
        let d = hs.dims;
        for b in 0..batch {
            for h in 0..heads {
                let base = b * seq * width + h * dh;
                let p = &probs[(b * heads + h) * seq * d.sp..(b * heads + h + 1) * seq * d.sp];
                load_rows(&qv.data[base..], width, seq, dh, d.dp, &mut hs.a);
                load_rows(&kv.data[base..], width, seq, dh, d.dp, &mut hs.b);
                load_rows(&g.data[base..], width, seq, dh, d.dp, &mut hs.c);
                load_cols(&vv.data[base..], width, seq, dh, d.sp, &mut hs.bt);
                // dP = dO Vᵀ, then dS = P ⊙ (dP − rowsum(P ⊙ dP))
                lower_scores(&hs.c, &hs.bt, d, S::one(), &mut hs.w);
                for i in 0..seq {
                    let n = i + 1;
                    let pr = &p[i * d.sp..i * d.sp + n];
                    let dr = &mut hs.w[i * d.sp..(i + 1) * d.sp];
                    let centre = if self.corrupt_attention_grad {
                        S::zero()
                    } else {
                        lane_dot(pr, &dr[..n])
                    };
                    for (e, pj) in dr[..n].iter_mut().zip(pr) {
                        *e = *pj * (*e - centre);
                    }
                    for e in dr[n..padded(n)].iter_mut() {
                        *e = S::zero();
                    }
                }
                // dQ = dS K · scale, dK = dSᵀ Q · scale, dV = Pᵀ dO
                combine_rows(&hs.w, &hs.b, d, &mut hs.o1);
                combine_cols(&hs.w, &hs.a, d, &mut hs.o2);
                combine_cols(p, &hs.c, d, &mut hs.o3);
                store_rows(&hs.o1, scale, d, width, &mut dq.data[base..]);
                store_rows(&hs.o2, scale, d, width, &mut dk.data[base..]);
                store_rows(&hs.o3, S::one(), d, width, &mut dv.data[base..]);
            }
        }
        self.accum(grads, q, |gq| gq.add_assign(&dq));
        self.accum(grads, k, |gk| gk.add_assign(&dk));
        self.accum(grads, v, |gv| gv.add_assign(&dv));
    }
}

pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
