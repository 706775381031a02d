use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn ilts(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ilts"))
        .args(args)
        .env("ILTS_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = ilts(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    ilts(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path, name: &str, family: &str, systems: usize, inits: usize, length: usize) -> PathBuf {
    let p = dir.join(name);
    ok(&[
        "gen-library",
        "--family",
        family,
        "--systems",
        &systems.to_string(),
        "--inits",
        &inits.to_string(),
        "--length",
        &length.to_string(),
        "--seed",
        "7",
        "--out",
        s(&p),
    ]);
    p
}

fn train(lib: &Path, dir: &Path, steps: u64) {
    ok(&[
        "train",
        "--library",
        s(lib),
        "--out-dir",
        s(dir),
        "--steps",
        &steps.to_string(),
        "--batch",
        "4",
        "--micro-batch",
        "4",
        "--lr",
        "1e-3",
        "--save-every",
        "1",
    ]);
}

#[test]
fn library_generation_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen(dir.path(), "a.lib", "identity", 1, 1, 251);
    let b = gen(dir.path(), "b.lib", "identity", 1, 1, 251);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let m = a.with_file_name("a.lib.manifest.json");
    assert!(ok(&["verify-manifest", s(&m)]).starts_with("ok"));
    std::fs::write(&a, b"tampered").unwrap();
    assert_eq!(code(&["verify-manifest", s(&m)]), 4);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.lib");
    assert_eq!(code(&["gen-library", "--family", "wobbly", "--out", s(&out)]), 2);
    assert_eq!(code(&["gen-library", "--no-such-flag"]), 2);
    assert_eq!(code(&["gen-library", "--systems", "1"]), 2);
    let missing = dir.path().join("nope.ckpt");
    assert_eq!(
        code(&[
            "eval",
            "--checkpoint",
            s(&missing),
            "--library",
            s(&missing),
            "--out",
            s(&out)
        ]),
        3
    );
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[gen-library]\nsystems = \"many\"\n").unwrap();
    assert_eq!(code(&["--config", s(&cfg), "gen-library", "--out", s(&out)]), 2);
}

#[test]
fn config_file_supplies_defaults_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    let out = dir.path().join("lib.bin");
    std::fs::write(&cfg, "[gen-library]\nfamily = \"identity\"\nsystems = 3\nlength = 5\n").unwrap();
    let text = ok(&["--config", s(&cfg), "gen-library", "--systems", "2", "--out", s(&out)]);
    assert!(text.contains("2 systems"), "{text}");
    assert!(text.contains("identity"), "{text}");
}

#[test]
fn train_resume_eval_ood_prune() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let train_lib = gen(d, "train.lib", "orthogonal", 64, 1, 251);
    let test_lib = gen(d, "test.lib", "orthogonal", 12, 8, 24);

    // interrupted run: 2 steps, then resumed to 4
    let split = d.join("split");
    train(&train_lib, &split, 2);
    train(&train_lib, &split, 4);
    let whole = d.join("whole");
    train(&train_lib, &whole, 4);
    assert_eq!(
        std::fs::read(split.join("latest.ckpt")).unwrap(),
        std::fs::read(whole.join("latest.ckpt")).unwrap()
    );
    assert_eq!(
        std::fs::read_to_string(split.join("train_log.ndjson")).unwrap(),
        std::fs::read_to_string(whole.join("train_log.ndjson")).unwrap()
    );

    let ckpt = whole.join("latest.ckpt");
    let metrics = d.join("needle.ndjson");
    ok(&[
        "eval", "--checkpoint", s(&ckpt), "--library", s(&test_lib), "--kind", "needle", "--N", "5", "--needle-pos",
        "0", "--configs", "2", "--inits", "8", "--out", s(&metrics),
    ]);
    let text = std::fs::read_to_string(&metrics).unwrap();
    for kind in ["needle_after_final", "needle_after_initial"] {
        for k in [1, 2, 3, 7, 8] {
            let hit = text.lines().any(|l| {
                let v: serde_json::Value = serde_json::from_str(l).unwrap();
                v["eval_kind"] == kind && v["index_within_segment"] == k && v["predictor"] == "model"
            });
            assert!(hit, "missing {kind} index {k}");
        }
    }

    let id_lib = gen(d, "id.lib", "identity", 12, 8, 24);
    let args = [
        "eval", "--checkpoint", s(&ckpt), "--library", s(&id_lib), "--N", "2", "--configs", "2", "--inits", "8",
        "--out", s(&metrics),
    ];
    assert_eq!(code(&args), 4);
    let args = [
        "eval", "--checkpoint", s(&ckpt), "--library", s(&test_lib), "--N", "25", "--configs", "2", "--inits", "8",
        "--out", s(&metrics),
    ];
    assert_eq!(code(&args), 4);

    let ood = d.join("sync.ndjson");
    let out = ok(&[
        "ood", "--checkpoint", s(&ckpt), "--library", s(&test_lib), "--kind", "sync", "--N", "2", "--configs", "2",
        "--inits", "8", "--out", s(&ood),
    ]);
    assert!(out.contains("records"));
    assert!(std::fs::read_to_string(&ood).unwrap().contains("\"variant\":\"sync\""));

    let circuit = d.join("one_after.dot");
    ok(&[
        "prune", "--checkpoint", s(&ckpt), "--library", s(&test_lib), "--task", "one-after", "--k", "100",
        "--sparsity", "0.98", "--steps", "3", "--inits", "8", "--out", s(&circuit),
    ]);
    let text = std::fs::read_to_string(&circuit).unwrap();
    assert!(text.contains("// k_scale: 100"));
    assert!(text.lines().any(|l| l.starts_with("// mse_one_after: ") && !l.ends_with("none")));
    assert!(text.lines().any(|l| l.starts_with("// mse_two_after: ") && !l.ends_with("none")));
    let m = circuit.with_file_name("one_after.dot.manifest.json");
    assert!(ok(&["verify-manifest", s(&m)]).starts_with("ok"));
}
