use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Poisson;
use serde::{Deserialize, Serialize};

use crate::dynsys::{State, STATE_DIM};
use crate::error::DatagenError;

use super::encode::{encode_obs, encode_special, EncodedTrace, SpecialSymbol, TOKEN_DIM};
use super::{GenConfig, TraceLibrary};

/// Where an observation row came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ObsRef {
    /// System slot within the trace (0..N).
    pub slot: u8,
    /// Library system id.
    pub system: u32,
    /// Library initial-state id.
    pub init: u32,
    /// Index into the system's rollout.
    pub step: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenKind {
    Start,
    Open(u8),
    Close(u8),
    Obs(ObsRef),
}

impl TokenKind {
    pub fn is_obs(&self) -> bool {
        matches!(self, TokenKind::Obs(_))
    }

    pub fn obs(&self) -> Option<&ObsRef> {
        match self {
            TokenKind::Obs(o) => Some(o),
            _ => None,
        }
    }
}

/// Half-open span `[start, end)` of context positions owned by one segment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub slot: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// The random choices behind one trace, before any payload is filled in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePlan {
    /// Maximum number of systems `N`.
    pub n_systems: usize,
    /// Library system id per slot.
    pub systems: Vec<usize>,
    /// Library initial-state id per slot.
    pub inits: Vec<usize>,
    /// Label pair per slot.
    pub pairs: Vec<u8>,
    /// Number of cuts `C` as sampled.
    pub n_cuts: usize,
    /// Cut positions in sampling order.
    pub cuts: Vec<usize>,
    pub segments: Vec<Segment>,
}

impl TracePlan {
    /// Number of distinct slots that own at least one segment.
    pub fn unique_systems(&self) -> usize {
        let mut used = vec![false; self.n_systems];
        for s in &self.segments {
            used[s.slot] = true;
        }
        used.into_iter().filter(|u| *u).count()
    }
}

/// A trace as a sequence of token kinds plus f64 payloads (zero on special
/// rows). Encoding to model inputs happens on demand.
#[derive(Clone, Debug, PartialEq)]
pub struct InterleavedTrace {
    pub kinds: Vec<TokenKind>,
    pub payloads: Vec<State>,
}

impl InterleavedTrace {
    pub fn new() -> Self {
        Self {
            kinds: vec![TokenKind::Start],
            payloads: vec![[0.0; STATE_DIM]],
        }
    }

    pub fn len(&self) -> usize {
        self.kinds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kinds.is_empty()
    }

    pub fn push_special(&mut self, kind: TokenKind) {
        debug_assert!(!kind.is_obs());
        self.kinds.push(kind);
        self.payloads.push([0.0; STATE_DIM]);
    }

    pub fn push_obs(&mut self, obs: ObsRef, x: State) {
        self.kinds.push(TokenKind::Obs(obs));
        self.payloads.push(x);
    }

    /// `len × 57` input rows.
    pub fn tokens(&self) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.len() * TOKEN_DIM);
        for (kind, x) in self.kinds.iter().zip(&self.payloads) {
            let row = match *kind {
                TokenKind::Start => encode_special(SpecialSymbol::Start, 0),
                TokenKind::Open(p) => encode_special(SpecialSymbol::Open, p as usize),
                TokenKind::Close(p) => encode_special(SpecialSymbol::Close, p as usize),
                TokenKind::Obs(_) => Ok(encode_obs(x)),
            }
            .expect("label pairs are validated on construction");
            out.extend_from_slice(&row);
        }
        out
    }

    /// Next-token targets and loss mask: `mask[t]` is set iff token `t + 1`
    /// is an observation, in which case `targets[t]` is its payload.
    pub fn targets_and_mask(&self) -> (Vec<State>, Vec<bool>) {
        let n = self.len();
        let mut targets = vec![[0.0; STATE_DIM]; n];
        let mut mask = vec![false; n];
        for t in 0..n.saturating_sub(1) {
            if self.kinds[t + 1].is_obs() {
                mask[t] = true;
                targets[t] = self.payloads[t + 1];
            }
        }
        (targets, mask)
    }

    pub fn encode(&self) -> EncodedTrace {
        let (targets, loss_mask) = self.targets_and_mask();
        EncodedTrace {
            len: self.len(),
            tokens: self.tokens(),
            targets: targets.iter().flatten().map(|v| *v as f32).collect(),
            loss_mask,
        }
    }

    /// Positions of every open label, in order.
    pub fn open_positions(&self) -> Vec<usize> {
        self.kinds
            .iter()
            .enumerate()
            .filter_map(|(i, k)| matches!(k, TokenKind::Open(_)).then_some(i))
            .collect()
    }
}

impl Default for InterleavedTrace {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-trace RNG: stream `index` of the ChaCha generator keyed by `seed`.
pub fn trace_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Normalized `P(N = k) ∝ k^{-s}` for `k = 1..=cap`, indexed by `k - 1`.
pub fn zipf_pmf(s: f64, cap: usize) -> Vec<f64> {
    let w: Vec<f64> = (1..=cap).map(|k| (k as f64).powf(-s)).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|v| v / z).collect()
}

pub fn sample_num_systems<R: Rng + ?Sized>(rng: &mut R, cfg: &GenConfig) -> usize {
    let pmf = zipf_pmf(cfg.zipf_s, cfg.zipf_cap);
    let dist = WeightedIndex::new(&pmf).expect("positive weights");
    dist.sample(rng) + 1
}

/// Draw the random structure of one trace: `N`, slot systems, label pairs,
/// cut count and positions, and the per-segment slot choices.
///
/// Segments start at position 1 and at every distinct cut; coincident cuts
/// collapse into one. Cuts are uniform over `1..context_len`.
pub fn plan_trace<R: Rng + ?Sized>(
    rng: &mut R,
    library: &TraceLibrary,
    cfg: &GenConfig,
) -> TracePlan {
    let n = sample_num_systems(rng, cfg).min(library.n_systems());
    let systems = sample_indices(rng, library.n_systems(), n).into_vec();
    let inits = (0..n)
        .map(|_| {
            if library.n_inits() == 1 {
                0
            } else {
                rng.gen_range(0..library.n_inits())
            }
        })
        .collect();
    let pairs = sample_indices(rng, cfg.label_pairs, n)
        .into_iter()
        .map(|p| p as u8)
        .collect();
    let rate = cfg.cut_rate_multiplier * n as f64;
    let n_cuts = if rate > 0.0 {
        let c: f64 = Poisson::new(rate).expect("positive rate").sample(rng);
        c as usize
    } else {
        0
    };
    let cuts: Vec<usize> = (0..n_cuts)
        .map(|_| rng.gen_range(1..cfg.context_len))
        .collect();

    let mut bounds: Vec<usize> = Vec::with_capacity(n_cuts + 2);
    bounds.push(1);
    bounds.extend_from_slice(&cuts);
    bounds.sort_unstable();
    bounds.dedup();
    bounds.push(cfg.context_len);
    let segments = bounds
        .windows(2)
        .map(|w| Segment {
            start: w[0],
            end: w[1],
            slot: rng.gen_range(0..n),
        })
        .collect();

    TracePlan {
        n_systems: n,
        systems,
        inits,
        pairs,
        n_cuts,
        cuts,
        segments,
    }
}

impl TracePlan {
    /// Lay out tokens for this plan, pulling each slot's next unconsumed
    /// states from the library.
    ///
    /// A segment of length 1 holds only its close label; length 2 holds the
    /// open label immediately followed by the close label.
    pub fn realize(&self, library: &TraceLibrary) -> Result<InterleavedTrace, DatagenError> {
        let mut trace = InterleavedTrace::new();
        let mut consumed = vec![0usize; self.n_systems];
        for seg in &self.segments {
            let pair = self.pairs[seg.slot];
            match seg.len() {
                0 => {}
                1 => trace.push_special(TokenKind::Close(pair)),
                len => {
                    trace.push_special(TokenKind::Open(pair));
                    let count = len - 2;
                    let system = self.systems[seg.slot];
                    let init = self.inits[seg.slot];
                    let first = consumed[seg.slot];
                    if first + count > library.length {
                        return Err(DatagenError::LibraryExhausted {
                            system,
                            needed: first + count,
                            length: library.length,
                        });
                    }
                    for (i, x) in library.states(system, init, first, count).into_iter().enumerate() {
                        trace.push_obs(
                            ObsRef {
                                slot: seg.slot as u8,
                                system: system as u32,
                                init: init as u32,
                                step: (first + i) as u32,
                            },
                            x,
                        );
                    }
                    consumed[seg.slot] += count;
                    trace.push_special(TokenKind::Close(pair));
                }
            }
        }
        Ok(trace)
    }
}

/// Generate one interleaved trace.
pub fn interleave<R: Rng + ?Sized>(
    library: &TraceLibrary,
    rng: &mut R,
    cfg: &GenConfig,
) -> Result<InterleavedTrace, DatagenError> {
    if library.n_sequences() == 0 {
        return Err(DatagenError::EmptyLibrary);
    }
    cfg.validate()?;
    let plan = plan_trace(rng, library, cfg);
    plan.realize(library)
}

/// Traces `first..first + count` of the stream keyed by `seed`. Each trace
/// uses its own RNG stream, so the result does not depend on how the range is
/// split up or parallelized.
pub fn generate_traces(
    library: &TraceLibrary,
    cfg: &GenConfig,
    seed: u64,
    first: u64,
    count: usize,
) -> Result<Vec<InterleavedTrace>, DatagenError> {
    let one = |i: u64| interleave(library, &mut trace_rng(seed, i), cfg);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (first..first + count as u64).into_par_iter().map(one).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (first..first + count as u64).map(one).collect()
    }
}
