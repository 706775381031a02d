//! Linear dynamical systems: Haar-random orthogonal (or identity) generators,
//! rollouts, and the two least-squares baselines built on top of them.
//!
//! Everything here is 64-bit. The model may train in 32-bit, but these
//! routines define the reference numbers the rest of the crate is checked
//! against.

use nalgebra::{DMatrix, SMatrix, SVector};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::DynsysError;

/// State dimension.
pub const STATE_DIM: usize = 5;

pub type State = [f64; STATE_DIM];

type Mat5 = SMatrix<f64, STATE_DIM, STATE_DIM>;
type Vec5 = SVector<f64, STATE_DIM>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Orthogonal,
    Identity,
}

impl Family {
    pub fn as_u8(self) -> u8 {
        match self {
            Family::Orthogonal => 0,
            Family::Identity => 1,
        }
    }

    pub fn from_u8(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Family::Orthogonal),
            1 => Some(Family::Identity),
            _ => None,
        }
    }
}

impl std::str::FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "orthogonal" | "ortho" => Ok(Family::Orthogonal),
            "identity" | "ident" => Ok(Family::Identity),
            other => Err(format!("unknown system family `{other}`")),
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Family::Orthogonal => "orthogonal",
            Family::Identity => "identity",
        })
    }
}

/// A 5x5 state-transition matrix, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemMatrix {
    entries: [[f64; STATE_DIM]; STATE_DIM],
    family: Family,
}

impl SystemMatrix {
    pub fn identity() -> Self {
        let mut entries = [[0.0; STATE_DIM]; STATE_DIM];
        for (i, row) in entries.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        Self {
            entries,
            family: Family::Identity,
        }
    }

    pub fn from_rows(entries: [[f64; STATE_DIM]; STATE_DIM], family: Family) -> Self {
        Self { entries, family }
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn rows(&self) -> &[[f64; STATE_DIM]; STATE_DIM] {
        &self.entries
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries[row][col]
    }

    /// `U x`.
    pub fn apply(&self, x: &State) -> State {
        if self.family == Family::Identity {
            return *x;
        }
        let mut out = [0.0; STATE_DIM];
        for (o, row) in out.iter_mut().zip(&self.entries) {
            *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
        out
    }

    /// `Uᵀ x`, the inverse step for orthogonal systems.
    pub fn apply_transpose(&self, x: &State) -> State {
        if self.family == Family::Identity {
            return *x;
        }
        let mut out = [0.0; STATE_DIM];
        for (row, xi) in self.entries.iter().zip(x) {
            for (o, a) in out.iter_mut().zip(row) {
                *o += a * xi;
            }
        }
        out
    }

    /// `self · other`.
    pub fn matmul(&self, other: &SystemMatrix) -> SystemMatrix {
        let out = self.to_na() * other.to_na();
        SystemMatrix::from_na(&out, self.family)
    }

    /// `max |UᵀU − I|`.
    pub fn orthogonality_defect(&self) -> f64 {
        let u = self.to_na();
        (u.transpose() * u - Mat5::identity()).amax()
    }

    pub fn determinant(&self) -> f64 {
        self.to_na().determinant()
    }

    /// Eigenvalue phase angles in (−π, π].
    pub fn eigen_phases(&self) -> Vec<f64> {
        self.to_na()
            .complex_eigenvalues()
            .iter()
            .map(|z| z.im.atan2(z.re))
            .collect()
    }

    pub fn max_abs_diff(&self, other: &SystemMatrix) -> f64 {
        (self.to_na() - other.to_na()).amax()
    }

    pub(crate) fn to_na(&self) -> Mat5 {
        Mat5::from_fn(|r, c| self.entries[r][c])
    }

    pub(crate) fn from_na(m: &Mat5, family: Family) -> Self {
        let mut entries = [[0.0; STATE_DIM]; STATE_DIM];
        for (r, row) in entries.iter_mut().enumerate() {
            for (c, e) in row.iter_mut().enumerate() {
                *e = m[(r, c)];
            }
        }
        Self { entries, family }
    }
}

/// Draw a system from `family`. Orthogonal draws are Haar-distributed: QR of
/// an iid Gaussian matrix with Q's columns multiplied by the signs of R's
/// diagonal.
pub fn sample_system<R: Rng + ?Sized>(rng: &mut R, family: Family) -> SystemMatrix {
    match family {
        Family::Identity => SystemMatrix::identity(),
        Family::Orthogonal => {
            let z = Mat5::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
            let qr = z.qr();
            let mut q = qr.q();
            let r = qr.r();
            for c in 0..STATE_DIM {
                if r[(c, c)] < 0.0 {
                    q.column_mut(c).neg_mut();
                }
            }
            SystemMatrix::from_na(&q, Family::Orthogonal)
        }
    }
}

/// `x₀ ~ N(0, I/5)`.
pub fn sample_initial_state<R: Rng + ?Sized>(rng: &mut R) -> State {
    let normal = Normal::new(0.0, (1.0 / STATE_DIM as f64).sqrt()).expect("valid std");
    let mut x = [0.0; STATE_DIM];
    for xi in &mut x {
        *xi = normal.sample(rng);
    }
    x
}

#[derive(Clone, Debug, PartialEq)]
pub struct StateSequence {
    pub states: Vec<State>,
    pub system_id: usize,
}

impl StateSequence {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// `states[i] = Uⁱ x₀`, computed by repeated application.
pub fn rollout(u: &SystemMatrix, x0: &State, length: usize) -> StateSequence {
    assert!(length >= 1, "rollout length must be at least 1");
    let mut states = Vec::with_capacity(length);
    states.push(*x0);
    for i in 1..length {
        let next = u.apply(&states[i - 1]);
        states.push(next);
    }
    StateSequence {
        states,
        system_id: 0,
    }
}

/// Relative cutoff below which a singular value of the stacked state matrix
/// counts as zero when inverting it exactly.
pub const SINGULAR_STACK_TOL: f64 = 1e-10;

/// Relative singular-value cutoff for the pseudoinverse.
pub const PINV_RCOND: f64 = 1e-12;

/// Recover `U = [x₁..x₅][x₀..x₄]⁻¹` from the first six states.
pub fn exact_solve(states: &[State]) -> Result<SystemMatrix, DynsysError> {
    if states.len() < STATE_DIM + 1 {
        return Err(DynsysError::TooFewStates {
            needed: STATE_DIM + 1,
            got: states.len(),
        });
    }
    let x0 = Mat5::from_fn(|r, c| states[c][r]);
    let x1 = Mat5::from_fn(|r, c| states[c + 1][r]);
    let sv = x0.singular_values();
    let smax = sv.max();
    let smin = sv.min();
    if !(smax > 0.0) || smin <= SINGULAR_STACK_TOL * smax {
        return Err(DynsysError::SingularStack {
            ratio: if smax > 0.0 { smin / smax } else { 0.0 },
        });
    }
    // U X0 = X1  <=>  X0ᵀ Uᵀ = X1ᵀ
    let lu = x0.transpose().lu();
    let ut = lu
        .solve(&x1.transpose())
        .ok_or(DynsysError::SingularStack { ratio: 0.0 })?;
    Ok(SystemMatrix::from_na(&ut.transpose(), Family::Orthogonal))
}

/// Least-squares dynamics estimate `Û = [x₁..xᵢ][x₀..xᵢ₋₁]†`.
#[derive(Clone, Debug)]
pub struct PredictorEstimate {
    pub u_hat: SystemMatrix,
    pub n_obs: usize,
}

/// Fit `Û` from an ordered history of one system's states. Returns `None`
/// when fewer than two states are available.
pub fn estimate_dynamics(history: &[State]) -> Option<PredictorEstimate> {
    let n = history.len();
    if n < 2 {
        return None;
    }
    let pairs = n - 1;
    let x0 = DMatrix::from_fn(STATE_DIM, pairs, |r, c| history[c][r]);
    let x1 = DMatrix::from_fn(STATE_DIM, pairs, |r, c| history[c + 1][r]);
    let pinv = pseudo_inverse(x0);
    let u = x1 * pinv;
    let u = Mat5::from_fn(|r, c| u[(r, c)]);
    Some(PredictorEstimate {
        u_hat: SystemMatrix::from_na(&u, Family::Orthogonal),
        n_obs: n,
    })
}

/// Predict the next state of a single system from its history `x₀..xᵢ`.
/// With no transition pairs (`i = 0`) the prediction is the prior mean, zero.
pub fn pinv_predict(history: &[State]) -> State {
    match (estimate_dynamics(history), history.last()) {
        (Some(est), Some(last)) => est.u_hat.apply(last),
        _ => [0.0; STATE_DIM],
    }
}

/// SVD pseudoinverse with singular values below `PINV_RCOND · σ_max`
/// truncated.
fn pseudo_inverse(m: DMatrix<f64>) -> DMatrix<f64> {
    let (rows, cols) = m.shape();
    let svd = m.svd(true, true);
    let smax = svd.singular_values.max();
    let cutoff = PINV_RCOND * smax;
    let u = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested Vᵀ");
    let mut out = DMatrix::zeros(cols, rows);
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s <= cutoff || s == 0.0 {
            continue;
        }
        let inv = 1.0 / s;
        // out += v_k u_kᵀ / s_k
        for c in 0..rows {
            let uc = u[(c, k)] * inv;
            for r in 0..cols {
                out[(r, c)] += vt[(k, r)] * uc;
            }
        }
    }
    out
}

pub fn sq_dist(a: &State, b: &State) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn sq_norm(a: &State) -> f64 {
    a.iter().map(|x| x * x).sum()
}

#[allow(dead_code)]
pub(crate) fn to_vec5(x: &State) -> Vec5 {
    Vec5::from_column_slice(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn identity_family_is_exact_identity() {
        let u = sample_system(&mut rng(1), Family::Identity);
        for r in 0..STATE_DIM {
            for c in 0..STATE_DIM {
                assert_eq!(u.get(r, c), if r == c { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn orthogonal_draws_are_orthogonal() {
        let mut g = rng(2);
        for _ in 0..200 {
            let u = sample_system(&mut g, Family::Orthogonal);
            assert!(u.orthogonality_defect() < 1e-10);
            assert!((u.determinant().abs() - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn initial_state_moments() {
        let mut g = rng(3);
        let n = 100_000;
        let mut norm = 0.0;
        let mut mean = [0.0; STATE_DIM];
        for _ in 0..n {
            let x = sample_initial_state(&mut g);
            norm += sq_norm(&x);
            for (m, v) in mean.iter_mut().zip(&x) {
                *m += v;
            }
        }
        assert!((norm / n as f64 - 1.0).abs() < 0.02);
        for m in mean {
            assert!((m / n as f64).abs() < 0.01);
        }
    }

    #[test]
    fn seeded_draws_are_bit_identical() {
        let a = sample_initial_state(&mut rng(9));
        let b = sample_initial_state(&mut rng(9));
        assert_eq!(a.map(f64::to_bits), b.map(f64::to_bits));
        let ua = sample_system(&mut rng(9), Family::Orthogonal);
        let ub = sample_system(&mut rng(9), Family::Orthogonal);
        assert_eq!(ua, ub);
    }

    #[test]
    fn identity_rollout_copies_constant() {
        let x0 = sample_initial_state(&mut rng(4));
        let seq = rollout(&SystemMatrix::identity(), &x0, 251);
        assert_eq!(seq.len(), 251);
        assert!(seq.states.iter().all(|s| *s == x0));
    }

    #[test]
    fn orthogonal_rollout_preserves_norm() {
        let mut g = rng(5);
        let u = sample_system(&mut g, Family::Orthogonal);
        let x0 = sample_initial_state(&mut g);
        let seq = rollout(&u, &x0, 251);
        let n0 = sq_norm(&x0).sqrt();
        for s in &seq.states {
            assert!((sq_norm(s).sqrt() - n0).abs() < 1e-10);
        }
        let direct = u.apply(&u.apply(&x0));
        assert_eq!(seq.states[2], direct);
    }

    #[test]
    fn exact_solve_recovers_generator() {
        let mut g = rng(6);
        let u = sample_system(&mut g, Family::Orthogonal);
        let x0 = sample_initial_state(&mut g);
        let seq = rollout(&u, &x0, 6);
        let rec = exact_solve(&seq.states).unwrap();
        assert!(rec.max_abs_diff(&u) < 1e-9);
    }

    #[test]
    fn exact_solve_rejects_identity_stack() {
        let x0 = sample_initial_state(&mut rng(7));
        let seq = rollout(&SystemMatrix::identity(), &x0, 6);
        assert!(matches!(
            exact_solve(&seq.states),
            Err(DynsysError::SingularStack { .. })
        ));
    }

    #[test]
    fn exact_solve_is_noise_sensitive() {
        let mut g = rng(8);
        let u = sample_system(&mut g, Family::Orthogonal);
        let x0 = sample_initial_state(&mut g);
        let mut states = rollout(&u, &x0, 6).states;
        let noise = Normal::new(0.0, 1e-3).unwrap();
        for s in &mut states {
            for v in s.iter_mut() {
                *v += noise.sample(&mut g);
            }
        }
        let rec = exact_solve(&states).unwrap();
        assert!(rec.max_abs_diff(&u) > 1e-6);
    }

    #[test]
    fn pinv_is_exact_after_six_states() {
        let mut g = rng(10);
        for _ in 0..50 {
            let u = sample_system(&mut g, Family::Orthogonal);
            let x0 = sample_initial_state(&mut g);
            let seq = rollout(&u, &x0, 20);
            for i in 5..19 {
                let pred = pinv_predict(&seq.states[..=i]);
                assert!(sq_dist(&pred, &seq.states[i + 1]) <= 1e-12);
            }
        }
    }

    #[test]
    fn pinv_with_single_state_predicts_zero() {
        let mut g = rng(11);
        let mut errs: Vec<f64> = (0..1000)
            .map(|_| {
                let u = sample_system(&mut g, Family::Orthogonal);
                let x0 = sample_initial_state(&mut g);
                let x1 = u.apply(&x0);
                let pred = pinv_predict(&[x0]);
                assert_eq!(pred, [0.0; STATE_DIM]);
                sq_dist(&pred, &x1)
            })
            .collect();
        errs.sort_by(f64::total_cmp);
        let median = errs[errs.len() / 2];
        assert!((0.5..=1.5).contains(&median), "median {median}");
    }

    #[test]
    fn pinv_identity_two_copies() {
        let x0 = sample_initial_state(&mut rng(12));
        let pred = pinv_predict(&[x0, x0]);
        for (p, x) in pred.iter().zip(&x0) {
            assert!((p - x).abs() < 1e-15);
        }
    }
}
