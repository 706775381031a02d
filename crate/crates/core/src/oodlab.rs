//! Out-of-distribution variants of the needle dataset. Each construction
//! touches only the rows it names; everything else is copied bit for bit.

use rand::Rng;

use crate::datagen::{trace_rng, ObsRef, TokenKind, TraceLibrary, N_LABEL_PAIRS};
use crate::dynsys::{sample_initial_state, Family, State};
use crate::error::OodError;
use crate::evalsuite::{build_needle_dataset, LibraryId, NeedleConfig, NeedleDataset, OodKind};

fn final_open(ds: &NeedleDataset) -> Result<usize, OodError> {
    ds.meta.layout.final_open.ok_or(OodError::UncutDataset)
}

/// Segment adjacent to the needle: the next one, or the previous one when the
/// needle is last.
pub fn default_wrong_segment(ds: &NeedleDataset) -> usize {
    let needle = ds.needle();
    if needle + 1 < ds.n_systems() {
        needle + 1
    } else {
        needle.saturating_sub(1)
    }
}

/// Replace the query open label with the open label of haystack segment
/// `wrong`.
pub fn make_swap(ds: &NeedleDataset, wrong: usize) -> Result<NeedleDataset, OodError> {
    let fo = final_open(ds)?;
    if wrong >= ds.n_systems() {
        return Err(OodError::SegmentOutOfRange {
            index: wrong,
            n_systems: ds.n_systems(),
        });
    }
    if wrong == ds.needle() {
        return Err(OodError::IndexCollision(wrong));
    }
    let mut out = ds.clone();
    for (t, pairs) in out.traces.iter_mut().zip(&ds.meta.pairs) {
        t.kinds[fo] = TokenKind::Open(pairs[wrong]);
    }
    out.meta.ood = Some(OodKind::SwapToWrongSeen);
    Ok(out)
}

/// Replace the query open label with one whose pair no haystack segment
/// uses, drawn uniformly per trace from stream `n` of `seed`.
pub fn make_unseen_label(ds: &NeedleDataset, seed: u64) -> Result<NeedleDataset, OodError> {
    let fo = final_open(ds)?;
    if ds.n_systems() >= N_LABEL_PAIRS {
        return Err(OodError::NoFreeLabel);
    }
    let mut out = ds.clone();
    for (n, (t, pairs)) in out.traces.iter_mut().zip(&ds.meta.pairs).enumerate() {
        let free: Vec<u8> = (0..N_LABEL_PAIRS as u8).filter(|p| !pairs.contains(p)).collect();
        let pick = free[trace_rng(seed, n as u64).gen_range(0..free.len())];
        t.kinds[fo] = TokenKind::Open(pick);
    }
    out.meta.ood = Some(OodKind::UnseenLabelMisdirect);
    Ok(out)
}

/// Keep the needle's own query label but replace the test-segment payloads
/// with observations `0..seg_len` of a system from `fresh`: configuration `c`
/// uses fresh system `c mod n` with initial state `i mod m`.
///
/// A fresh library built from the same family and seed as the dataset's is
/// the same library, so its system ids must then avoid the haystack's.
pub fn make_seen_label_new_sequence(ds: &NeedleDataset, fresh: &TraceLibrary) -> Result<NeedleDataset, OodError> {
    let fo = final_open(ds)?;
    let cfg = &ds.meta.cfg;
    let same_library = ds.meta.library == LibraryId::of(fresh);
    let mut out = ds.clone();
    for c in 0..cfg.n_configs {
        let sys = c % fresh.n_systems();
        if same_library && (c..c + cfg.n_systems).contains(&sys) {
            return Err(OodError::SystemCollision(sys));
        }
        for i in 0..cfg.n_inits {
            let t = &mut out.traces[ds.trace_index(c, i)];
            let init = i % fresh.n_inits();
            let states = fresh.states(sys, init, 0, cfg.seg_len);
            for (j, (&p, x)) in ds.meta.layout.after_final.iter().zip(states).enumerate() {
                let row = p + 1;
                debug_assert!(row > fo);
                let slot = t.kinds[row].obs().map_or(0, |o| o.slot);
                t.kinds[row] = TokenKind::Obs(ObsRef {
                    slot,
                    system: sys as u32,
                    init: init as u32,
                    step: j as u32,
                });
                t.payloads[row] = x;
            }
        }
    }
    out.meta.ood = Some(OodKind::SeenLabelNewSequence);
    Ok(out)
}

/// Haystack where every segment ends one step before a shared state `x₁₀`:
/// segment `k` holds `xᵢ = (U_kᵀ)^{10−i} x₁₀` for `i = 0..10`, and the test
/// segment continues the needle as `x_{10+j} = U_needle^j x₁₀`.
///
/// `x₁₀ ~ N(0, I/5)` is drawn per trace from stream `c · n_inits + i` of
/// `seed`. Rewinds run in f64.
pub fn make_synchronized(lib: &TraceLibrary, cfg: &NeedleConfig, seed: u64) -> Result<NeedleDataset, OodError> {
    if lib.family != Family::Orthogonal {
        return Err(OodError::FamilyUnsupported);
    }
    let mut ds = build_needle_dataset(lib, cfg, seed)?;
    let l = cfg.seg_len;
    let fo = final_open(&ds)?;
    for c in 0..cfg.n_configs {
        for i in 0..cfg.n_inits {
            let n = ds.trace_index(c, i);
            let mut rng = trace_rng(seed ^ SYNC_STREAM, n as u64);
            let x_shared = sample_initial_state(&mut rng);
            let t = &mut ds.traces[n];
            for k in 0..cfg.n_systems {
                let u = lib.system(c + k);
                let mut seg: Vec<State> = vec![x_shared; l + 1];
                for s in (0..l).rev() {
                    seg[s] = u.apply_transpose(&seg[s + 1]);
                }
                let open = ds.meta.layout.opens[k];
                for (s, x) in seg[..l].iter().enumerate() {
                    t.payloads[open + 1 + s] = *x;
                }
            }
            let u = lib.system(c + cfg.needle_position);
            let mut x = x_shared;
            for j in 0..l {
                if j > 0 {
                    x = u.apply(&x);
                }
                t.payloads[fo + 1 + j] = x;
            }
        }
    }
    ds.meta.ood = Some(OodKind::SynchronizedRotations);
    Ok(ds)
}

/// Keeps synchronized draws independent of the label-pair draws that use the
/// same stream indices.
const SYNC_STREAM: u64 = 0x005E_ED0F_5A7C;

/// `max_k ‖U_k x₉⁽ᵏ⁾ − x₁₀‖` for one synchronized trace, where `x₁₀` is the
/// first test-segment observation.
pub fn sync_defect(lib: &TraceLibrary, ds: &NeedleDataset, config: usize, init: usize) -> f64 {
    let l = ds.meta.cfg.seg_len;
    let t = &ds.traces[ds.trace_index(config, init)];
    let x10 = ds.test_segment(ds.trace_index(config, init))[0];
    (0..ds.n_systems())
        .map(|k| {
            let x9 = t.payloads[ds.meta.layout.opens[k] + l];
            let y = lib.system(config + k).apply(&x9);
            crate::dynsys::sq_dist(&y, &x10).sqrt()
        })
        .fold(0.0, f64::max)
}
