//! Browser bindings for three small views of the data: one interleaved
//! trace, the pseudoinverse error curve and the eigenphase histogram of
//! sampled systems.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use wasm_bindgen::prelude::*;

use ilts_core::datagen::{build_library, interleave, GenConfig, TokenKind};
use ilts_core::dynsys::{pinv_predict, rollout, sample_initial_state, sample_system, sq_dist, Family};

fn family(name: &str) -> Result<Family, JsError> {
    name.parse().map_err(|e: String| JsError::new(&e))
}

/// One training trace as JSON: `{tokens: [{kind, pair | slot, system, x}], n_systems}`
/// where `kind` is `start | open | close | obs` and `x` is the 5-vector payload
/// (zeros on label tokens).
#[wasm_bindgen]
pub fn interleaved_trace(n_systems: usize, seed: u64, family_name: &str) -> Result<String, JsError> {
    let lib = build_library(n_systems.clamp(1, 200), 1, 251, family(family_name)?, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7ACE);
    let trace = interleave(&lib, &mut rng, &GenConfig::default()).map_err(|e| JsError::new(&e.to_string()))?;
    let tokens: Vec<_> = trace
        .kinds
        .iter()
        .zip(&trace.payloads)
        .map(|(k, x)| match k {
            TokenKind::Start => json!({ "kind": "start" }),
            TokenKind::Open(p) => json!({ "kind": "open", "pair": p }),
            TokenKind::Close(p) => json!({ "kind": "close", "pair": p }),
            TokenKind::Obs(o) => json!({ "kind": "obs", "slot": o.slot, "system": o.system, "x": x }),
        })
        .collect();
    Ok(json!({ "tokens": tokens, "n_systems": lib.n_systems() }).to_string())
}

/// Mean squared error of the pseudoinverse predictor at observation index
/// `1..=length`, averaged over `n_runs` random systems.
#[wasm_bindgen]
pub fn pinv_error_curve(length: usize, n_runs: usize, seed: u64, family_name: &str) -> Result<Vec<f64>, JsError> {
    let fam = family(family_name)?;
    let length = length.clamp(2, 250);
    let n_runs = n_runs.clamp(1, 2000);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = vec![0.0; length];
    for _ in 0..n_runs {
        let u = sample_system(&mut rng, fam);
        let x0 = sample_initial_state(&mut rng);
        let seq = rollout(&u, &x0, length);
        for (k, slot) in acc.iter_mut().enumerate() {
            *slot += sq_dist(&pinv_predict(&seq.states[..k]), &seq.states[k]);
        }
    }
    Ok(acc.into_iter().map(|s| s / n_runs as f64).collect())
}

/// Histogram of eigenvalue phases in `[-π, π]` over `n_systems` sampled
/// orthogonal systems.
#[wasm_bindgen]
pub fn eigenphase_histogram(n_systems: usize, bins: usize, seed: u64) -> Vec<u32> {
    let bins = bins.clamp(1, 512);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut h = vec![0u32; bins];
    let pi = std::f64::consts::PI;
    for _ in 0..n_systems.min(100_000) {
        for p in sample_system(&mut rng, Family::Orthogonal).eigen_phases() {
            let b = (((p + pi) / (2.0 * pi)) * bins as f64) as usize;
            h[b.min(bins - 1)] += 1;
        }
    }
    h
}
