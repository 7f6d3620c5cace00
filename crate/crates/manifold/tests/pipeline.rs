//! End-to-end pipeline tests through the actual `manifold` binary: config
//! validation, the generate → extract → train → eval → sweep chain, digest
//! checks, and the monitor command over a recorded trace.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use manifold::config::RunConfig;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_manifold")
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    Command::new(bin())
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn manifold")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Tiny config so the whole chain stays fast; the mix is cleared so the
/// dataset uses every record the small run produces.
fn write_small_config(dir: &Path, seed: u64) -> PathBuf {
    let mut cfg = RunConfig::reference(seed);
    cfg.dataset.pairs = 3;
    cfg.dataset.variants_per_pair = 1;
    cfg.dataset.rudimentary = 25;
    cfg.dataset.mix = None;
    let path = dir.join("config.json");
    std::fs::write(&path, cfg.to_json_pretty()).unwrap();
    path
}

#[test]
fn full_chain_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_small_config(dir.path(), 11);
    let cfg = cfg.to_str().unwrap();

    // generate with --pairs override: 2 pairs -> 4 core records.
    let out = run_in(dir.path(), &["generate", "--config", cfg, "--pairs", "2", "--out", "run-a"]);
    assert_ok(&out, "generate");
    let summary = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(summary.contains("vanilla: 2"), "summary:\n{summary}");
    assert!(summary.contains("perturbed: 2"), "summary:\n{summary}");
    assert!(dir.path().join("run-a/archive/archive.jsonl").exists());
    assert!(dir.path().join("run-a/summary.txt").exists());
    assert!(dir.path().join("run-a/manifest.json").exists());

    for cmd in [
        vec!["extract", "--config", cfg, "--out", "run-a"],
        vec!["train", "--config", cfg, "--out", "run-a"],
        vec!["eval", "--config", cfg, "--out", "run-a"],
        vec!["sweep", "--config", cfg, "--x", "1..2", "--out", "run-a"],
    ] {
        let out = run_in(dir.path(), &cmd);
        assert_ok(&out, cmd[0]);
    }
    for artifact in ["features.csv", "model.json", "eval.csv", "sweep.csv"] {
        assert!(dir.path().join("run-a").join(artifact).exists(), "{artifact} missing");
    }

    // eval.csv reloads to the same metric values.
    let eval_text = std::fs::read_to_string(dir.path().join("run-a/eval.csv")).unwrap();
    let data_row = eval_text.lines().last().unwrap();
    let report = manifold::forest::EvalReport::from_csv_row(data_row).unwrap();
    assert_eq!(report.to_csv_row(), data_row);

    // Second identical run: identical digests for every artifact.
    let out = run_in(dir.path(), &["generate", "--config", cfg, "--pairs", "2", "--out", "run-b"]);
    assert_ok(&out, "generate (second run)");
    for cmd in [
        vec!["extract", "--config", cfg, "--out", "run-b"],
        vec!["train", "--config", cfg, "--out", "run-b"],
        vec!["sweep", "--config", cfg, "--x", "1..2", "--out", "run-b"],
    ] {
        let out = run_in(dir.path(), &cmd);
        assert_ok(&out, cmd[0]);
    }
    let manifest = |run: &str| -> serde_json::Value {
        serde_json::from_str(
            &std::fs::read_to_string(dir.path().join(run).join("manifest.json")).unwrap(),
        )
        .unwrap()
    };
    let a = manifest("run-a");
    let b = manifest("run-b");
    for key in ["archive.digest", "features.csv", "model.json", "sweep.csv"] {
        assert_eq!(a.get(key), b.get(key), "digest differs for {key}");
        assert!(a.get(key).is_some(), "manifest missing {key}");
    }
}

#[test]
fn monitor_flags_a_perturbed_trace() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_small_config(dir.path(), 13);
    let cfg = cfg_path.to_str().unwrap();

    for cmd in [
        vec!["generate", "--config", cfg, "--out", "run"],
        vec!["extract", "--config", cfg, "--out", "run"],
        vec!["train", "--config", cfg, "--out", "run"],
    ] {
        let out = run_in(dir.path(), &cmd);
        assert_ok(&out, cmd[0]);
    }

    // Pick a perturbed record's trace file from the archive.
    let jsonl =
        std::fs::read_to_string(dir.path().join("run/archive/archive.jsonl")).unwrap();
    let perturbed_trace = jsonl
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .find(|v| v["kind"] == "perturbed")
        .map(|v| v["trace_file"].as_str().unwrap().to_string())
        .expect("a perturbed record");
    let trace_path = dir.path().join("run/archive").join(&perturbed_trace);

    let out = run_in(
        dir.path(),
        &[
            "monitor",
            "--model",
            dir.path().join("run/model.json").to_str().unwrap(),
            "--trace",
            trace_path.to_str().unwrap(),
            "--stride",
            "0.5",
            "--out",
            "run",
        ],
    );
    assert_ok(&out, "monitor");
    let stdout = String::from_utf8_lossy(&out.stdout).to_string();
    // Self-consistency: a training-distribution collision trace should
    // raise at least one flag.
    let flagged: usize = stdout
        .split_whitespace()
        .nth(2)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    assert!(flagged >= 1, "no windows flagged: {stdout}");
    let log = std::fs::read_to_string(dir.path().join("run/monitor.csv")).unwrap();
    assert!(log.lines().count() > 2, "empty monitor log");
}

#[test]
fn config_validation_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::reference(1);
    cfg.ce.elite_fraction = 1.5;
    let path = dir.path().join("bad.json");
    std::fs::write(&path, cfg.to_json_pretty()).unwrap();
    let out = run_in(dir.path(), &["generate", "--config", path.to_str().unwrap()]);
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr).to_string();
    assert!(stderr.contains("elite_fraction"), "stderr: {stderr}");
}

#[test]
fn eval_before_train_is_a_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_small_config(dir.path(), 17);
    let out = run_in(
        dir.path(),
        &["eval", "--config", cfg_path.to_str().unwrap(), "--out", "nothing-here"],
    );
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr).to_string();
    assert!(stderr.contains("missing artifact"), "stderr: {stderr}");
}

#[test]
fn eval_refuses_mismatched_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_small_config(dir.path(), 19);
    let cfg = cfg_path.to_str().unwrap();
    for cmd in [
        vec!["generate", "--config", cfg, "--out", "one"],
        vec!["extract", "--config", cfg, "--out", "one"],
        vec!["train", "--config", cfg, "--out", "one"],
    ] {
        assert_ok(&run_in(dir.path(), &cmd), cmd[0]);
    }
    // A second archive generated with a different seed yields a different
    // matrix; evaluating the first model against it must refuse.
    for cmd in [
        vec!["generate", "--config", cfg, "--seed-override", "999", "--out", "two"],
        vec!["extract", "--config", cfg, "--seed-override", "999", "--out", "two"],
    ] {
        assert_ok(&run_in(dir.path(), &cmd), cmd[0]);
    }
    let out = run_in(
        dir.path(),
        &[
            "eval",
            "--config",
            cfg,
            "--model",
            dir.path().join("one/model.json").to_str().unwrap(),
            "--matrix",
            dir.path().join("two/features.csv").to_str().unwrap(),
            "--out",
            "one",
        ],
    );
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr).to_string();
    assert!(stderr.contains("digest mismatch"), "stderr: {stderr}");
}

#[test]
fn init_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &["init-config", "--out", "ref.json", "--seed", "42"]);
    assert_ok(&out, "init-config");
    let loaded = RunConfig::load(&dir.path().join("ref.json")).unwrap();
    assert_eq!(loaded.seed, 42);
    assert_eq!(loaded, {
        let mut c = RunConfig::reference(42);
        c.seed = 42;
        c
    });
}
