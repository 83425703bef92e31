//! The `dtmdp` binary: stage-by-stage runs, manifests, and exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dtmdp_pipeline::manifest::{artifact_hashes, hash_file, read_json, Manifest};

const STAGES: [&str; 9] = [
    "collect",
    "abstract",
    "train-reward",
    "relabel",
    "train-policy",
    "rank",
    "simulate",
    "evaluate",
    "robustness",
];

fn tiny_config(dir: &Path, seed: u64, extra: &str) -> PathBuf {
    let text = format!(
        r#"master_seed = {seed}

[paths]
artifacts = "{out}"

[collect]
n_scenarios = 8
episodes_per_scenario = 5

[scheme]
kind = "topology"
with_hubs = true

[irl]
max_pairs = 300

[irl.training]
hidden_units = 8
epochs = 3

[rl]
alphas = [0.5, 1.0]

[rl.train]
iterations = 100
hidden_units = 8

[ope]
k = 3

[sim]
n_scenarios = 3

[eval]
n_trials = 4
n_boot = 20
robustness_counts = [10, 20]
{extra}"#,
        out = dir.join("out").display()
    );
    let path = dir.join("config.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn dtmdp(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dtmdp"))
        .arg("--config")
        .arg(config)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn stages_run_one_by_one_and_record_hashes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), 3, "");
    let out = tmp.path().join("out");
    for stage in STAGES {
        assert_ok(&dtmdp(&cfg, &[stage]));
        let m: Manifest = read_json(&out.join(stage).join("manifest.json")).unwrap();
        assert_eq!(m.stage, stage);
        assert!(!m.artifacts.is_empty(), "{stage} recorded no artifacts");
        for (rel, hash) in m.artifacts.iter().chain(&m.inputs) {
            assert_eq!(&hash_file(&out.join(rel)).unwrap(), hash, "{stage}: {rel}");
        }
    }
    // Each downstream stage lists an upstream artifact among its inputs.
    let rank: Manifest = read_json(&out.join("rank/manifest.json")).unwrap();
    assert!(rank.inputs.keys().any(|k| k.starts_with("train-policy/")));
}

#[test]
fn ranking_marks_exactly_k_policies() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), 4, "");
    for stage in &STAGES[..6] {
        assert_ok(&dtmdp(&cfg, &[stage]));
    }
    let mut rdr = csv::Reader::from_path(tmp.path().join("out/rank/ranking.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    // Two alphas for each reward mode plus behavior cloning.
    assert_eq!(rows.len(), 5);
    let scores: Vec<f64> = rows.iter().map(|r| r[2].parse().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
    let ranks: Vec<usize> = rows.iter().map(|r| r[3].parse().unwrap()).collect();
    assert_eq!(ranks, vec![1, 2, 3, 4, 5]);
    let top: Vec<bool> = rows.iter().map(|r| &r[4] == "true").collect();
    assert_eq!(top, vec![true, true, true, false, false]);
}

#[test]
fn reproduce_is_deterministic_per_seed() {
    let hashes = |seed: u64| {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = tiny_config(tmp.path(), seed, "");
        assert_ok(&dtmdp(&cfg, &["reproduce"]));
        artifact_hashes(&tmp.path().join("out")).unwrap()
    };
    let a = hashes(5);
    assert_eq!(a, hashes(5));
    let b = hashes(6);
    assert_ne!(a["collect"], b["collect"]);
}

#[test]
fn seed_and_out_flags_override_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), 1, "");
    let other = tmp.path().join("elsewhere");
    assert_ok(&dtmdp(
        &cfg,
        &["--seed", "9", "--out", other.to_str().unwrap(), "collect"],
    ));
    assert!(!tmp.path().join("out").exists());

    let again = tmp.path().join("again");
    let edited = tiny_config(tmp.path(), 9, "");
    assert_ok(&dtmdp(
        &edited,
        &["--out", again.to_str().unwrap(), "collect"],
    ));
    assert_eq!(
        artifact_hashes(&other).unwrap()["collect"],
        artifact_hashes(&again).unwrap()["collect"]
    );
}

#[test]
fn invalid_config_exits_3_listing_every_problem() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), 1, "");
    let text = std::fs::read_to_string(&cfg)
        .unwrap()
        .replace("k = 3", "k = 0")
        .replace("n_trials = 4", "n_trials = 0");
    std::fs::write(&cfg, text).unwrap();
    let out = dtmdp(&cfg, &["collect"]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("ope.k") && err.contains("eval.n_trials"),
        "{err}"
    );
}

#[test]
fn unknown_config_key_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), 1, "\n[extra]\nfoo = 1\n");
    assert_eq!(dtmdp(&cfg, &["collect"]).status.code(), Some(3));
}

#[test]
fn missing_upstream_artifact_exits_4() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), 1, "");
    for stage in ["abstract", "rank", "evaluate"] {
        let out = dtmdp(&cfg, &[stage]);
        assert_eq!(out.status.code(), Some(4), "{stage}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("missing artifact"));
    }
}

#[test]
fn infeasible_stage_request_exits_5() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), 1, "");
    for stage in &STAGES[..4] {
        assert_ok(&dtmdp(&cfg, &[stage]));
    }
    let text = std::fs::read_to_string(&cfg).unwrap().replace(
        "robustness_counts = [10, 20]",
        "robustness_counts = [100000]",
    );
    std::fs::write(&cfg, text).unwrap();
    assert_eq!(dtmdp(&cfg, &["robustness"]).status.code(), Some(5));
}

#[test]
fn usage_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path(), 1, "");
    assert_eq!(dtmdp(&cfg, &["no-such-stage"]).status.code(), Some(2));
    assert_eq!(
        dtmdp(&cfg, &["--seed", "x", "collect"]).status.code(),
        Some(2)
    );
}
