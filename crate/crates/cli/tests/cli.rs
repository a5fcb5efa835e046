use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn smoke_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json")
}

fn hgbeam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hgbeam")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = hgbeam(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn full_pipeline_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config();
    let cfg = cfg.to_str().unwrap();
    let data = dir.path().join("data");
    let ckpt = dir.path().join("net.ckpt");
    let (data, ckpt) = (data.to_str().unwrap(), ckpt.to_str().unwrap());

    let manifest = ok(&["gen-data", "--config", cfg, "--out", data]);
    assert_eq!(manifest.lines().count(), 1 + 6);

    let epochs = ok(&["train", "--config", cfg, "--data", data, "--out", ckpt]);
    assert!(epochs.starts_with("epoch,loss"));
    assert!(Path::new(ckpt).exists());

    let eval = ok(&["eval", "--config", cfg, "--ckpt", ckpt, "--sizes", "3x3,5x5"]);
    let rows: Vec<&str> = eval.lines().skip(1).collect();
    assert_eq!(rows.len(), 2 * 3);
    assert!(rows.iter().any(|r| r.starts_with("hgnet,rician,5,5,")));

    let sweep = ok(&[
        "--format",
        "json",
        "adapt",
        "--config",
        cfg,
        "--ckpt",
        ckpt,
        "--H-sweep",
        "0,1,3",
    ]);
    let v: serde_json::Value = serde_json::from_str(&sweep).unwrap();
    let hs: Vec<u64> = v.as_array().unwrap().iter().filter_map(|r| r["h"].as_u64()).collect();
    assert_eq!(hs, vec![0, 1, 3, 0, 1, 3]);

    let gaps = ok(&["mmd-diag", "--ckpt", ckpt, "--data", data]);
    assert_eq!(gaps.lines().count(), 1 + 2);

    let bench = ok(&["--threads", "1", "bench", "--config", cfg, "--ckpt", ckpt]);
    assert!(bench.lines().any(|l| l.starts_with("wmmse,3,3,")));
}

#[test]
fn seed_override_changes_generated_data() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = smoke_config();
    let cfg = cfg.to_str().unwrap();
    let read = |seed: &str, name: &str| {
        let out = dir.path().join(name);
        ok(&[
            "--seed",
            seed,
            "gen-data",
            "--config",
            cfg,
            "--out",
            out.to_str().unwrap(),
        ]);
        std::fs::read(out.join("period_000_train.bin")).unwrap()
    };
    assert_eq!(read("5", "a"), read("5", "b"));
    assert_ne!(read("5", "a"), read("6", "c"));
}

#[test]
fn errors_exit_nonzero_with_a_message() {
    let cfg = smoke_config();
    let cfg = cfg.to_str().unwrap();
    for args in [
        vec!["eval", "--config", cfg, "--ckpt", "/nonexistent.ckpt"],
        vec!["eval", "--config", "/nonexistent.json", "--ckpt", "x"],
        vec!["eval", "--config", cfg, "--ckpt", "x", "--sizes", "4by4"],
        vec!["--format", "xml", "bench", "--config", cfg],
        vec!["frobnicate"],
    ] {
        let out = hgbeam(&args);
        assert!(!out.status.success(), "{args:?} should fail");
        assert!(!out.stderr.is_empty());
    }
}
