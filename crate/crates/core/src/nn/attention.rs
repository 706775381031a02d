//! Causal attention kernels for one head.
//!
//! Head dims are small (12–16), so general GEMM spends most of its time
//! packing. These kernels keep a block of query rows in registers and only
//! touch the lower triangle. Rows of score/probability matrices are stored
//! with a stride padded to a multiple of 8; entries above the diagonal are
//! kept at zero.

use super::tensor::Scalar;

const LANES: usize = 8;
/// Query rows per register block; must equal `LANES` so blocks align with
/// the padded row chunks.
const RB: usize = 8;

pub(crate) fn padded(n: usize) -> usize {
    n.div_ceil(LANES) * LANES
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Dims {
    pub seq: usize,
    /// Padded row stride of score matrices.
    pub sp: usize,
    pub dh: usize,
    /// Padded head width of row copies.
    pub dp: usize,
}

/// Scratch buffers for one head, reused across heads.
pub(crate) struct HeadScratch<S> {
    pub dims: Dims,
    /// `seq × dp` row-major copies.
    pub a: Vec<S>,
    pub b: Vec<S>,
    pub c: Vec<S>,
    /// `dh × sp` transposed copy.
    pub bt: Vec<S>,
    /// `seq × dp` outputs.
    pub o1: Vec<S>,
    pub o2: Vec<S>,
    pub o3: Vec<S>,
    /// `seq × sp` work matrix.
    pub w: Vec<S>,
}

impl<S: Scalar> HeadScratch<S> {
    pub fn new(seq: usize, dh: usize) -> Self {
        let sp = padded(seq);
        let dp = head_width(dh);
        let z = |n: usize| vec![S::zero(); n];
        Self {
            dims: Dims { seq, sp, dh, dp },
            a: z(sp * dp),
            b: z(sp * dp),
            c: z(sp * dp),
            bt: z(dh * sp),
            o1: z(sp * dp),
            o2: z(sp * dp),
            o3: z(sp * dp),
            w: z(seq * sp),
        }
    }
}

fn head_width(dh: usize) -> usize {
    match dh {
        0..=8 => 8,
        9..=16 => 16,
        17..=32 => 32,
        33..=64 => 64,
        _ => panic!("head dim {dh} exceeds 64"),
    }
}

/// Copy a strided `seq × dh` head block into `seq × dp` (zero padded).
pub(crate) fn load_rows<S: Scalar>(src: &[S], width: usize, seq: usize, dh: usize, dp: usize, dst: &mut [S]) {
    for t in 0..seq {
        dst[t * dp..t * dp + dh].copy_from_slice(&src[t * width..t * width + dh]);
    }
}

/// Copy a strided `seq × dh` head block into `dh × sp` (transposed).
pub(crate) fn load_cols<S: Scalar>(src: &[S], width: usize, seq: usize, dh: usize, sp: usize, dst: &mut [S]) {
    for t in 0..seq {
        let row = &src[t * width..t * width + dh];
        for d in 0..dh {
            dst[d * sp + t] = row[d];
        }
    }
}

/// Write `alpha ×` the first `dh` columns of `seq × dp` rows into a strided block.
pub(crate) fn store_rows<S: Scalar>(src: &[S], alpha: S, d: Dims, width: usize, dst: &mut [S]) {
    for t in 0..d.seq {
        for (o, v) in dst[t * width..t * width + d.dh].iter_mut().zip(&src[t * d.dp..t * d.dp + d.dh]) {
            *o = alpha * *v;
        }
    }
}

/// `out[i, j] = scale · Σ_d a[i, d]·bt[d, j]` for `j < padded(i + 1)`.
/// `a` is `seq × dp`, `bt` is `dh × sp`, `out` is `seq × sp`.
pub(crate) fn lower_scores<S: Scalar>(a: &[S], bt: &[S], h: Dims, scale: S, out: &mut [S]) {
    let (seq, sp, dh, dp) = (h.seq, h.sp, h.dh, h.dp);
    for i0 in (0..seq).step_by(RB) {
        let rows = RB.min(seq - i0);
        let jmax = padded(i0 + rows);
        for j0 in (0..jmax).step_by(LANES) {
            let mut acc = [[S::zero(); LANES]; RB];
            for d in 0..dh {
                let b = &bt[d * sp + j0..d * sp + j0 + LANES];
                for (r, accr) in acc.iter_mut().enumerate() {
                    let x = a[(i0 + r.min(rows - 1)) * dp + d];
                    for l in 0..LANES {
                        accr[l] = accr[l] + x * b[l];
                    }
                }
            }
            for (r, accr) in acc.iter().enumerate().take(rows) {
                let o = &mut out[(i0 + r) * sp + j0..(i0 + r) * sp + j0 + LANES];
                for l in 0..LANES {
                    o[l] = accr[l] * scale;
                }
            }
        }
    }
}

/// `out[i, :] = Σ_{j ≤ i} w[i, j]·b[j, :]`, with `w` lower triangular
/// (`seq × sp`) and `b` `seq × dp`.
pub(crate) fn combine_rows<S: Scalar>(w: &[S], b: &[S], h: Dims, out: &mut [S]) {
    match h.dp {
        8 => combine_rows_n::<S, 8>(w, b, h, out),
        16 => combine_rows_n::<S, 16>(w, b, h, out),
        32 => combine_rows_n::<S, 32>(w, b, h, out),
        _ => combine_rows_n::<S, 64>(w, b, h, out),
    }
}

fn combine_rows_n<S: Scalar, const DP: usize>(w: &[S], b: &[S], h: Dims, out: &mut [S]) {
    let (seq, sp) = (h.seq, h.sp);
    for i0 in (0..seq).step_by(RB) {
        let rows = RB.min(seq - i0);
        let mut acc = [[S::zero(); DP]; RB];
        for j in 0..i0 + rows {
            let bv = &b[j * DP..j * DP + DP];
            for (r, accr) in acc.iter_mut().enumerate() {
                let x = w[(i0 + r.min(rows - 1)) * sp + j];
                for l in 0..DP {
                    accr[l] = accr[l] + x * bv[l];
                }
            }
        }
        for (r, accr) in acc.iter().enumerate().take(rows) {
            out[(i0 + r) * DP..(i0 + r + 1) * DP].copy_from_slice(accr);
        }
    }
}

/// `out[j, :] = Σ_{i ≥ j} w[i, j]·b[i, :]`, i.e. `wᵀ·b` for lower-triangular `w`.
pub(crate) fn combine_cols<S: Scalar>(w: &[S], b: &[S], h: Dims, out: &mut [S]) {
    match h.dp {
        8 => combine_cols_n::<S, 8>(w, b, h, out),
        16 => combine_cols_n::<S, 16>(w, b, h, out),
        32 => combine_cols_n::<S, 32>(w, b, h, out),
        _ => combine_cols_n::<S, 64>(w, b, h, out),
    }
}

fn combine_cols_n<S: Scalar, const DP: usize>(w: &[S], b: &[S], h: Dims, out: &mut [S]) {
    let (seq, sp) = (h.seq, h.sp);
    for j0 in (0..seq).step_by(RB) {
        let cols = RB.min(seq - j0);
        let mut acc = [[S::zero(); DP]; RB];
        for i in j0..seq {
            let bv = &b[i * DP..i * DP + DP];
            let wr = &w[i * sp + j0..i * sp + j0 + RB];
            for (r, accr) in acc.iter_mut().enumerate() {
                let x = wr[r];
                for l in 0..DP {
                    accr[l] = accr[l] + x * bv[l];
                }
            }
        }
        for (r, accr) in acc.iter().enumerate().take(cols) {
            out[(j0 + r) * DP..(j0 + r + 1) * DP].copy_from_slice(accr);
        }
    }
}

#[inline(never)]
fn lane_max<S: Scalar>(row: &[S]) -> S {
    let mut mx = [S::neg_infinity(); LANES];
    let chunks = row.chunks_exact(LANES);
    let tail = chunks.remainder();
    for c in chunks {
        for l in 0..LANES {
            mx[l] = if c[l] > mx[l] { c[l] } else { mx[l] };
        }
    }
    mx.iter()
        .chain(tail)
        .copied()
        .fold(S::neg_infinity(), |m, e| if e > m { e } else { m })
}

#[inline(never)]
fn exp_shifted<S: Scalar>(row: &mut [S], m: S) {
    for e in row.iter_mut() {
        *e = (*e - m).fast_exp();
    }
}

#[inline(never)]
pub(crate) fn lane_sum<S: Scalar>(row: &[S]) -> S {
    let mut acc = [S::zero(); LANES];
    let chunks = row.chunks_exact(LANES);
    let tail = chunks.remainder();
    for c in chunks {
        for l in 0..LANES {
            acc[l] = acc[l] + c[l];
        }
    }
    acc.iter().chain(tail).copied().sum()
}

#[inline(never)]
pub(crate) fn lane_dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = [S::zero(); LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let (ta, tb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    acc.iter().copied().sum::<S>() + ta.iter().zip(tb).map(|(x, y)| *x * *y).sum::<S>()
}

/// Softmax over `row[..n]`; `row[n..padded(n)]` is zeroed.
pub(crate) fn softmax_row<S: Scalar>(row: &mut [S], n: usize) {
    let m = lane_max(&row[..n]);
    exp_shifted(&mut row[..n], m);
    let inv = S::one() / lane_sum(&row[..n]);
    for e in row[..n].iter_mut() {
        *e = *e * inv;
    }
    for e in row[n..padded(n)].iter_mut() {
        *e = S::zero();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_lower(a: &[f64], b: &[f64], seq: usize, dh: usize) -> Vec<f64> {
        let mut out = vec![0.0; seq * seq];
        for i in 0..seq {
            for j in 0..=i {
                out[i * seq + j] = (0..dh).map(|d| a[i * dh + d] * b[j * dh + d]).sum();
            }
        }
        out
    }

    #[test]
    fn kernels_match_naive() {
        for (seq, dh) in [(1, 3), (7, 12), (19, 16), (33, 20)] {
            let h = HeadScratch::<f64>::new(seq, dh).dims;
            let vals = |salt: u64| -> Vec<f64> {
                (0..seq * dh)
                    .map(|i| ((i as u64 * 7919 + salt * 104_729) % 997) as f64 / 997.0 - 0.5)
                    .collect()
            };
            let (qa, ka) = (vals(1), vals(2));
            let mut a = vec![0.0; h.sp * h.dp];
            let mut bt = vec![0.0; dh * h.sp];
            load_rows(&qa, dh, seq, dh, h.dp, &mut a);
            load_cols(&ka, dh, seq, dh, h.sp, &mut bt);
            let mut w = vec![0.0; seq * h.sp];
            lower_scores(&a, &bt, h, 2.0, &mut w);
            let want = naive_lower(&qa, &ka, seq, dh);
            for i in 0..seq {
                for j in i + 1..padded(i + 1) {
                    w[i * h.sp + j] = 0.0;
                }
                for j in 0..=i {
                    assert!((w[i * h.sp + j] - 2.0 * want[i * seq + j]).abs() < 1e-12);
                }
            }
            // rows: w·k ; cols: wᵀ·k
            let mut kb = vec![0.0; h.sp * h.dp];
            load_rows(&ka, dh, seq, dh, h.dp, &mut kb);
            let mut rows = vec![0.0; h.sp * h.dp];
            let mut cols = vec![0.0; h.sp * h.dp];
            combine_rows(&w, &kb, h, &mut rows);
            combine_cols(&w, &kb, h, &mut cols);
            for i in 0..seq {
                for d in 0..dh {
                    let r: f64 = (0..=i).map(|j| w[i * h.sp + j] * ka[j * dh + d]).sum();
                    let c: f64 = (i..seq).map(|j| w[j * h.sp + i] * ka[j * dh + d]).sum();
                    assert!((rows[i * h.dp + d] - r).abs() < 1e-12);
                    assert!((cols[i * h.dp + d] - c).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn softmax_row_normalizes_prefix() {
        let mut row = vec![1.0f64, 2.0, 3.0, 9.0, 9.0, 9.0, 9.0, 9.0];
        softmax_row(&mut row, 3);
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        assert!((row[2] - 3.0f64.exp() / z).abs() < 1e-15);
        assert!(row[3..].iter().all(|v| *v == 0.0));
    }
}
