use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynsys::{rollout, sample_initial_state, sample_system, Family, State, StateSequence, SystemMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LibraryRole {
    Train,
    Test,
}

/// A bank of rolled-out sequences, one per (system, initial state).
///
/// Only the generators and initial states are held in memory; states are
/// recomputed on demand by repeated application of the system matrix, which
/// reproduces the same bits every time. Initial states are rounded to f32 at
/// generation so the on-disk f32 sequences pin them exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceLibrary {
    pub family: Family,
    pub seed: u64,
    pub role: LibraryRole,
    pub length: usize,
    systems: Vec<SystemMatrix>,
    initial: Vec<State>,
    n_inits: usize,
}

/// Build a library of `n_systems × n_inits` sequences of `length` states.
///
/// Systems are drawn first, then initial states in system-major order, all
/// from one ChaCha stream seeded with `seed`.
pub fn build_library(
    n_systems: usize,
    n_inits: usize,
    length: usize,
    family: Family,
    seed: u64,
) -> TraceLibrary {
    assert!(n_systems >= 1, "library needs at least one system");
    assert!(n_inits >= 1 && length >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let systems: Vec<SystemMatrix> = (0..n_systems).map(|_| sample_system(&mut rng, family)).collect();
    let initial = (0..n_systems * n_inits)
        .map(|_| sample_initial_state(&mut rng).map(|v| v as f32 as f64))
        .collect();
    let role = if n_inits == 1 {
        LibraryRole::Train
    } else {
        LibraryRole::Test
    };
    TraceLibrary {
        family,
        seed,
        role,
        length,
        systems,
        initial,
        n_inits,
    }
}

impl TraceLibrary {
    pub fn from_parts(
        family: Family,
        seed: u64,
        length: usize,
        systems: Vec<SystemMatrix>,
        initial: Vec<State>,
        n_inits: usize,
    ) -> Self {
        assert_eq!(initial.len(), systems.len() * n_inits);
        let role = if n_inits == 1 {
            LibraryRole::Train
        } else {
            LibraryRole::Test
        };
        Self {
            family,
            seed,
            role,
            length,
            systems,
            initial,
            n_inits,
        }
    }

    pub fn with_role(mut self, role: LibraryRole) -> Self {
        self.role = role;
        self
    }

    pub fn n_systems(&self) -> usize {
        self.systems.len()
    }

    pub fn n_inits(&self) -> usize {
        self.n_inits
    }

    pub fn n_sequences(&self) -> usize {
        self.initial.len()
    }

    pub fn system(&self, id: usize) -> &SystemMatrix {
        &self.systems[id]
    }

    pub fn systems(&self) -> &[SystemMatrix] {
        &self.systems
    }

    pub fn initial_state(&self, system: usize, init: usize) -> &State {
        &self.initial[system * self.n_inits + init]
    }

    /// The full rolled-out sequence for `(system, init)`.
    pub fn sequence(&self, system: usize, init: usize) -> StateSequence {
        let mut seq = rollout(&self.systems[system], self.initial_state(system, init), self.length);
        seq.system_id = system;
        seq
    }

    /// States `[start, start + count)` of `(system, init)`. May run past
    /// `length`; callers that must respect the library length check first.
    pub fn states(&self, system: usize, init: usize, start: usize, count: usize) -> Vec<State> {
        let u = &self.systems[system];
        let mut x = *self.initial_state(system, init);
        for _ in 0..start {
            x = u.apply(&x);
        }
        let mut out = Vec::with_capacity(count);
        for i in 0..count {
            if i > 0 {
                x = u.apply(&x);
            }
            out.push(x);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_library_shape() {
        let lib = build_library(40_000, 1, 251, Family::Orthogonal, 7);
        assert_eq!(lib.n_sequences(), 40_000);
        assert_eq!(lib.role, LibraryRole::Train);
        let seq = lib.sequence(39_999, 0);
        assert_eq!(seq.len(), 251);
    }

    #[test]
    fn test_library_groups_by_system() {
        let lib = build_library(100, 1000, 251, Family::Orthogonal, 8);
        assert_eq!(lib.n_sequences(), 100_000);
        assert_eq!(lib.n_systems(), 100);
        assert_eq!(lib.role, LibraryRole::Test);
    }

    #[test]
    fn minimal_identity_library() {
        let lib = build_library(1, 1, 3, Family::Identity, 1);
        let seq = lib.sequence(0, 0);
        assert_eq!(seq.len(), 3);
        assert!(seq.states.iter().all(|s| *s == seq.states[0]));
    }

    #[test]
    fn states_window_matches_full_rollout() {
        let lib = build_library(3, 2, 40, Family::Orthogonal, 2);
        let full = lib.sequence(2, 1);
        let win = lib.states(2, 1, 10, 10);
        assert_eq!(&full.states[10..20], &win[..]);
    }

    #[test]
    fn deterministic_in_seed() {
        let a = build_library(5, 3, 10, Family::Orthogonal, 99);
        let b = build_library(5, 3, 10, Family::Orthogonal, 99);
        assert_eq!(a, b);
        let c = build_library(5, 3, 10, Family::Orthogonal, 100);
        assert_ne!(a, c);
    }
}
