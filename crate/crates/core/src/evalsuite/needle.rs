//! Needle-in-a-haystack datasets.
//!
//! ```text
//! pos  0      1      2 … 11    12      13 …   12N  12N+1   12N+2 … 12N+11
//!      start  open₀  x₀ … x₉   close₀  …      closeₙ₋₁ open* x₁₀ … x₁₉
//!                                              └ haystack ┘ └ test segment ┘
//! ```
//!
//! "k after final" is the prediction emitted at `final_open + k − 1`, whose
//! target is test-segment observation `k` (so `k = 1` targets `x₁₀`). "k after
//! initial" is the prediction at `open₀ + k − 1`, targeting `x_{k−1}` of the
//! first haystack segment.

use rand::seq::index::sample as sample_indices;
use serde::{Deserialize, Serialize};

use crate::datagen::{decode_obs, trace_rng, InterleavedTrace, ObsRef, TokenKind, TraceLibrary, N_LABEL_PAIRS};
use crate::dynsys::{Family, STATE_DIM};
use crate::error::EvalError;

/// Prediction indices reported after the initial and final open labels.
pub const NEEDLE_INDICES: [usize; 5] = [1, 2, 3, 7, 8];

/// `needle_position` recorded for the uncut control.
pub const CONTROL_POSITION: i64 = -2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeedleConfig {
    pub n_systems: usize,
    pub seg_len: usize,
    pub n_configs: usize,
    pub n_inits: usize,
    /// Haystack segment that the test segment continues (0 = first).
    pub needle_position: usize,
}

impl NeedleConfig {
    /// Reduced size for quick runs: 10 configurations × 100 initial states.
    pub fn desk(n_systems: usize) -> Self {
        Self {
            n_systems,
            seg_len: 10,
            n_configs: 10,
            n_inits: 100,
            needle_position: 0,
        }
    }

    /// 50 configurations × 1000 initial states.
    pub fn full(n_systems: usize) -> Self {
        Self {
            n_configs: 50,
            n_inits: 1000,
            ..Self::desk(n_systems)
        }
    }

    pub fn with_needle(mut self, position: usize) -> Self {
        self.needle_position = position;
        self
    }

    /// Library systems needed: configuration `c` uses systems `c..c + N`.
    pub fn systems_needed(&self) -> usize {
        self.n_configs + self.n_systems - 1
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let bad = |m: String| Err(EvalError::InvalidConfig(m));
        if self.n_systems == 0 || self.n_systems > N_LABEL_PAIRS {
            return bad(format!("haystack size {} not in 1..={N_LABEL_PAIRS}", self.n_systems));
        }
        if self.needle_position >= self.n_systems {
            return bad(format!(
                "needle position {} outside a haystack of {}",
                self.needle_position, self.n_systems
            ));
        }
        if self.seg_len < 2 || self.n_configs == 0 || self.n_inits == 0 {
            return bad("segment length ≥ 2 and non-empty config/init counts required".into());
        }
        Ok(())
    }
}

/// Context positions shared by every trace of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeedleLayout {
    /// Position of each haystack segment's open label.
    pub opens: Vec<usize>,
    /// Query open label; `None` for the uncut control.
    pub final_open: Option<usize>,
    /// `after_final[k − 1]` is the position whose prediction targets
    /// test-segment observation `k`.
    pub after_final: Vec<usize>,
    pub len: usize,
}

impl NeedleLayout {
    /// Position whose prediction targets observation `k` (1-based) of
    /// haystack segment `segment`.
    pub fn after_open(&self, segment: usize, k: usize) -> usize {
        self.opens[segment] + k - 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OodKind {
    SwapToWrongSeen,
    SynchronizedRotations,
    UnseenLabelMisdirect,
    SeenLabelNewSequence,
}

impl std::fmt::Display for OodKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OodKind::SwapToWrongSeen => "swap",
            OodKind::SynchronizedRotations => "sync",
            OodKind::UnseenLabelMisdirect => "unseen_label",
            OodKind::SeenLabelNewSequence => "seen_label_new_sequence",
        })
    }
}

/// Identifies the library a dataset was drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LibraryId {
    pub family: Family,
    pub seed: u64,
}

impl LibraryId {
    pub fn of(lib: &TraceLibrary) -> Self {
        Self {
            family: lib.family,
            seed: lib.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeedleMeta {
    pub cfg: NeedleConfig,
    pub seed: u64,
    pub library: LibraryId,
    pub layout: NeedleLayout,
    /// True for the uncut control: the needle segment runs on for
    /// `2 · seg_len` observations instead of being closed and reopened.
    pub control: bool,
    pub ood: Option<OodKind>,
    /// Label pair index per trace and haystack segment.
    pub pairs: Vec<Vec<u8>>,
}

/// Traces are stored configuration-major: trace `c · n_inits + i` uses
/// configuration `c` and initial state `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct NeedleDataset {
    pub meta: NeedleMeta,
    pub traces: Vec<InterleavedTrace>,
}

impl NeedleDataset {
    pub fn n_systems(&self) -> usize {
        self.meta.cfg.n_systems
    }

    pub fn needle(&self) -> usize {
        self.meta.cfg.needle_position
    }

    pub fn trace_index(&self, config: usize, init: usize) -> usize {
        config * self.meta.cfg.n_inits + init
    }

    /// Shape `[n_configs, n_inits, 12N + 1, 5]` of the decoded haystack: the
    /// start row plus every haystack row, special rows decoding to zero.
    pub fn haystack_shape(&self) -> [usize; 4] {
        let c = &self.meta.cfg;
        let rows = 1 + c.n_systems * (c.seg_len + 2);
        [c.n_configs, c.n_inits, rows, STATE_DIM]
    }

    /// Decode the haystack portion of every trace through the token encoding,
    /// flattened in [`haystack_shape`](Self::haystack_shape) order.
    pub fn decode_haystack(&self) -> Vec<f32> {
        let [_, _, rows, _] = self.haystack_shape();
        let mut out = Vec::with_capacity(self.traces.len() * rows * STATE_DIM);
        for t in &self.traces {
            let tokens = t.tokens();
            for r in 0..rows {
                let row = &tokens[r * crate::datagen::TOKEN_DIM..(r + 1) * crate::datagen::TOKEN_DIM];
                out.extend_from_slice(&decode_obs(row).unwrap_or([0.0; STATE_DIM]));
            }
        }
        out
    }

    /// Test-segment payloads of one trace.
    pub fn test_segment(&self, trace: usize) -> Vec<[f64; STATE_DIM]> {
        let t = &self.traces[trace];
        self.meta.layout.after_final.iter().map(|p| t.payloads[p + 1]).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_value(&self.meta).expect("metadata serializes");
        crate::io::encode_traces(&meta, &self.traces)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, crate::error::FormatError> {
        let (meta, traces) = crate::io::decode_traces(bytes)?;
        let meta: NeedleMeta =
            serde_json::from_value(meta).map_err(|e| crate::error::FormatError::Corrupt(e.to_string()))?;
        let c = &meta.cfg;
        if traces.len() != c.n_configs * c.n_inits || traces.iter().any(|t| t.len() != meta.layout.len) {
            return Err(crate::error::FormatError::Corrupt("dataset shape disagrees with its header".into()));
        }
        Ok(Self { meta, traces })
    }
}

fn check_library(lib: &TraceLibrary, cfg: &NeedleConfig) -> Result<(), EvalError> {
    cfg.validate()?;
    if lib.n_systems() < cfg.systems_needed() {
        return Err(EvalError::InsufficientSystems {
            needed: cfg.systems_needed(),
            available: lib.n_systems(),
        });
    }
    if lib.length < 2 * cfg.seg_len {
        return Err(EvalError::LibraryTooShort {
            needed: 2 * cfg.seg_len,
            length: lib.length,
        });
    }
    if lib.n_inits() < cfg.n_inits {
        return Err(EvalError::InvalidConfig(format!(
            "library has {} initial states per system, dataset wants {}",
            lib.n_inits(),
            cfg.n_inits
        )));
    }
    Ok(())
}

fn push_states(t: &mut InterleavedTrace, lib: &TraceLibrary, slot: usize, system: usize, init: usize, first: usize, count: usize) {
    for (j, x) in lib.states(system, init, first, count).into_iter().enumerate() {
        t.push_obs(
            ObsRef {
                slot: slot as u8,
                system: system as u32,
                init: init as u32,
                step: (first + j) as u32,
            },
            x,
        );
    }
}

fn build(lib: &TraceLibrary, cfg: &NeedleConfig, seed: u64, control: bool) -> Result<NeedleDataset, EvalError> {
    check_library(lib, cfg)?;
    let n = cfg.n_systems;
    let l = cfg.seg_len;
    let needle = cfg.needle_position;
    let mut traces = Vec::with_capacity(cfg.n_configs * cfg.n_inits);
    let mut all_pairs = Vec::with_capacity(traces.capacity());
    for c in 0..cfg.n_configs {
        for i in 0..cfg.n_inits {
            let mut rng = trace_rng(seed, (c * cfg.n_inits + i) as u64);
            let pairs: Vec<u8> = sample_indices(&mut rng, N_LABEL_PAIRS, n)
                .into_iter()
                .map(|p| p as u8)
                .collect();
            let mut t = InterleavedTrace::new();
            for (k, &p) in pairs.iter().enumerate() {
                t.push_special(TokenKind::Open(p));
                if control && k == needle {
                    push_states(&mut t, lib, k, c + k, i, 0, 2 * l);
                } else {
                    push_states(&mut t, lib, k, c + k, i, 0, l);
                    t.push_special(TokenKind::Close(p));
                }
            }
            if !control {
                t.push_special(TokenKind::Open(pairs[needle]));
                push_states(&mut t, lib, needle, c + needle, i, l, l);
            }
            traces.push(t);
            all_pairs.push(pairs);
        }
    }
    let opens: Vec<usize> = (0..n).map(|k| 1 + k * (l + 2)).collect();
    let (final_open, after_final) = if control {
        // x_{l+k-1} of the needle segment is predicted from the row before it.
        let first = opens[needle] + l;
        (None, (0..l).map(|k| first + k).collect())
    } else {
        let fo = 1 + n * (l + 2);
        (Some(fo), (0..l).map(|k| fo + k).collect())
    };
    let len = traces[0].len();
    Ok(NeedleDataset {
        meta: NeedleMeta {
            cfg: cfg.clone(),
            seed,
            library: LibraryId::of(lib),
            layout: NeedleLayout {
                opens,
                final_open,
                after_final,
                len,
            },
            control,
            ood: None,
            pairs: all_pairs,
        },
        traces,
    })
}

/// Build the needle-in-a-haystack dataset. Label pairs are drawn without
/// replacement per trace from stream `c · n_inits + i` of `seed`.
pub fn build_needle_dataset(lib: &TraceLibrary, cfg: &NeedleConfig, seed: u64) -> Result<NeedleDataset, EvalError> {
    build(lib, cfg, seed, false)
}

/// Control variant: the needle segment is not closed; it runs on for
/// `2 · seg_len` observations, so the "test segment" is its second half seen
/// without interruption. The needle is always the last haystack segment.
pub fn build_needle_control(lib: &TraceLibrary, cfg: &NeedleConfig, seed: u64) -> Result<NeedleDataset, EvalError> {
    let cfg = cfg.clone().with_needle(cfg.n_systems.saturating_sub(1));
    build(lib, &cfg, seed, true)
}
