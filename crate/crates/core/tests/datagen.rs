mod common;

use proptest::prelude::*;

use ilts_core::datagen::{
    build_library, generate_traces, plan_trace, trace_rng, GenConfig, TokenKind, PAYLOAD_DIM0, TOKEN_DIM,
};
use ilts_core::dynsys::{Family, STATE_DIM};
use ilts_core::io::{read_library, read_traces, write_library, write_traces};

#[test]
fn label_pairs_do_not_depend_on_the_system() {
    let lib = build_library(40, 1, 251, Family::Orthogonal, 21);
    let cfg = GenConfig::default();
    let mut counts = vec![0u64; cfg.label_pairs];
    for i in 0..100_000u64 {
        let plan = plan_trace(&mut trace_rng(22, i), &lib, &cfg);
        if let Some(slot) = plan.systems.iter().position(|s| *s == 7) {
            counts[plan.pairs[slot] as usize] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    let expected = vec![total as f64 / cfg.label_pairs as f64; cfg.label_pairs];
    let chi = common::chi_square(&counts, &expected);
    assert!(total > 2000, "system 7 drawn only {total} times");
    assert!(chi.p > 1e-3, "chi2 {} on {} dof, p = {}", chi.stat, chi.dof, chi.p);
}

#[test]
fn saved_library_regenerates_the_same_traces() {
    let dir = std::env::temp_dir().join(format!("ilts-datagen-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let lib = build_library(30, 1, 251, Family::Orthogonal, 23);
    let path = dir.join("lib.bin");
    write_library(&path, &lib).unwrap();
    let back = read_library(&path).unwrap();
    let cfg = GenConfig::default();
    let a = generate_traces(&lib, &cfg, 24, 0, 32).unwrap();
    let b = generate_traces(&back, &cfg, 24, 0, 32).unwrap();
    assert_eq!(a, b);

    let tpath = dir.join("traces.bin");
    write_traces(&tpath, &serde_json::json!({"seed": 24}), &a).unwrap();
    let (meta, c) = read_traces(&tpath).unwrap();
    assert_eq!(meta["seed"], 24);
    assert_eq!(a, c);
    std::fs::remove_dir_all(&dir).ok();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn targets_are_the_next_payload(seed in any::<u64>(), len in 3usize..=251) {
        let lib = build_library(30, 1, 251, Family::Orthogonal, seed % 7);
        let cfg = GenConfig { context_len: len, ..GenConfig::default() };
        let t = generate_traces(&lib, &cfg, seed, 0, 1).unwrap().remove(0);
        prop_assert_eq!(t.len(), len);
        let e = t.encode();
        for i in 0..len {
            if e.loss_mask[i] {
                let next = &e.token_row(i + 1)[PAYLOAD_DIM0..PAYLOAD_DIM0 + STATE_DIM];
                let same = e.target_row(i).iter().zip(next).all(|(a, b)| a.to_bits() == b.to_bits());
                prop_assert!(same, "row {}", i);
            } else {
                prop_assert!(e.target_row(i).iter().all(|v| *v == 0.0));
            }
        }
        prop_assert_eq!(e.tokens.len(), len * TOKEN_DIM);
    }

    #[test]
    fn each_slot_keeps_one_label_pair(seed in any::<u64>()) {
        let lib = build_library(30, 1, 251, Family::Orthogonal, 5);
        let t = generate_traces(&lib, &GenConfig::default(), seed, 0, 1).unwrap().remove(0);
        let mut pair_of = std::collections::HashMap::new();
        let mut open = None;
        for k in &t.kinds {
            match k {
                TokenKind::Open(p) => open = Some(*p),
                TokenKind::Close(_) | TokenKind::Start => open = None,
                TokenKind::Obs(o) => {
                    let p = open.expect("observation outside a segment");
                    prop_assert_eq!(*pair_of.entry(o.slot).or_insert(p), p);
                }
            }
        }
    }
}
