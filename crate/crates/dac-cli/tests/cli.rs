//! End-to-end tests of the `dac` binary: every stage runs as a subprocess
//! against a temporary experiment directory, exactly as a user would drive
//! it, and the exit codes distinguish config errors (2), stale or corrupt
//! artifacts (3), and divergence (4).

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::json;

fn dac_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dac"))
}

/// A dataset and schedule small enough that the full pipeline finishes in
/// seconds. Accuracy is irrelevant here; artifact flow and error handling
/// are what is under test.
fn tiny_config() -> serde_json::Value {
    json!({
        "dataset": {
            "n_train": 24, "n_val": 8, "n_test": 8,
            "correlation": 0.75, "height": 64, "width": 32,
            "noise_std": 0.02, "seed": 7
        },
        "erm": {"epochs": 2, "batch_size": 8, "lr": 0.01, "seed": 7},
        "dac": {
            "alpha": 1.0, "q": 0.5, "epochs": 2, "batch_size": 8,
            "grid": {"step": 0.2, "max": 0.8}, "seed": 7
        },
        "sweep": {"alphas": [0.0, 1.0], "qs": [0.5], "causal_flags": [true]}
    })
}

struct Run {
    _tmp: tempfile::TempDir,
    config_path: PathBuf,
    out: PathBuf,
}

impl Run {
    fn new(config: &serde_json::Value) -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let config_path = tmp.path().join("config.json");
        std::fs::write(&config_path, serde_json::to_vec_pretty(config).unwrap()).unwrap();
        let out = tmp.path().join("run");
        Run { _tmp: tmp, config_path, out }
    }

    fn dac(&self, args: &[&str]) -> Output {
        dac_bin()
            .arg("--config")
            .arg(&self.config_path)
            .arg("--out")
            .arg(&self.out)
            .args(args)
            .output()
            .expect("binary runs")
    }

    fn expect_ok(&self, args: &[&str]) -> String {
        let output = self.dac(args);
        assert!(
            output.status.success(),
            "{args:?} failed:\nstdout: {}\nstderr: {}",
            String::from_utf8_lossy(&output.stdout),
            String::from_utf8_lossy(&output.stderr)
        );
        String::from_utf8_lossy(&output.stdout).into_owned()
    }

    fn expect_code(&self, args: &[&str], code: i32) -> String {
        let output = self.dac(args);
        assert_eq!(
            output.status.code(),
            Some(code),
            "{args:?} expected exit {code}:\nstdout: {}\nstderr: {}",
            String::from_utf8_lossy(&output.stdout),
            String::from_utf8_lossy(&output.stderr)
        );
        String::from_utf8_lossy(&output.stderr).into_owned()
    }
}

fn manifest_hash(out: &Path) -> String {
    let raw = std::fs::read(out.join("dataset").join("manifest.json")).unwrap();
    let manifest: serde_json::Value = serde_json::from_slice(&raw).unwrap();
    manifest["content_hash"].as_str().unwrap().to_string()
}

fn assert_png(path: &Path) {
    let bytes = std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(&bytes[..4], b"\x89PNG", "{} is not a PNG", path.display());
}

#[test]
fn full_pipeline_runs_and_leaves_the_expected_artifacts() {
    let run = Run::new(&tiny_config());

    run.expect_ok(&["generate"]);
    assert!(run.out.join("dataset/manifest.json").exists());
    assert!(run.out.join("dataset/images/train.f32").exists());
    assert!(run.out.join("dataset/resolved_config.json").exists());

    // Claimed directories are not silently replaced.
    let err = run.expect_code(&["generate"], 2);
    assert!(err.contains("--force"), "unhelpful message: {err}");

    run.expect_ok(&["train-erm"]);
    assert!(run.out.join("erm/checkpoint.bin").exists());
    assert!(run.out.join("erm/train_log.jsonl").exists());
    assert!(run.out.join("erm/loss_cache.json").exists());

    let premask_out = run.expect_ok(&["premask"]);
    assert!(premask_out.contains("24 images"), "got: {premask_out}");
    assert!(run.out.join("masks/index.json").exists());
    assert!(run.out.join("masks/train-00000.mask.png").exists());

    run.expect_ok(&["retrain"]);
    assert!(run.out.join("retrain/checkpoint.bin").exists());
    assert!(run.out.join("retrain/metrics.json").exists());
    assert!(run.out.join("retrain/selections.json").exists());

    run.expect_ok(&["retrain", "--baseline", "plain"]);
    run.expect_ok(&["retrain", "--baseline", "balanced"]);
    assert!(run.out.join("retrain-plain/checkpoint.bin").exists());
    assert!(run.out.join("retrain-balanced/checkpoint.bin").exists());

    run.expect_ok(&["sweep"]);
    let summary: serde_json::Value = serde_json::from_slice(
        &std::fs::read(run.out.join("sweep/summary.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(summary["cells"].as_array().unwrap().len(), 2);
    assert!(run.out.join("sweep/best/checkpoint.bin").exists());

    run.expect_ok(&["evaluate"]);
    let csv = std::fs::read_to_string(run.out.join("evaluate/metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "checkpoint,y0s0,y0s1,y1s0,y1s1,worst,average,sample_weighted"
    );
    let names: Vec<&str> = lines.map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(
        names,
        ["erm", "retrain", "retrain-balanced", "retrain-plain", "sweep-best"]
    );

    run.expect_ok(&["plot"]);
    for chart in ["attention.svg", "loss_quartiles.svg", "sweep.svg"] {
        assert!(run.out.join("plot").join(chart).exists(), "missing {chart}");
    }
    assert_png(&run.out.join("plot/heatmap_val-00000.png"));

    let png = run.out.join("composed.png");
    run.expect_ok(&[
        "triptych",
        "--donor-i",
        "train-00000",
        "--donor-j",
        "train-00001",
        "--png",
        png.to_str().unwrap(),
    ]);
    assert_png(&png);
}

#[test]
fn identical_configs_generate_identical_datasets() {
    let a = Run::new(&tiny_config());
    let b = Run::new(&tiny_config());
    a.expect_ok(&["generate"]);
    b.expect_ok(&["generate"]);
    assert_eq!(manifest_hash(&a.out), manifest_hash(&b.out));

    // The global seed flag overrides the config seed and changes the data.
    let c = Run::new(&tiny_config());
    c.expect_ok(&["--seed", "123", "generate"]);
    assert_ne!(manifest_hash(&a.out), manifest_hash(&c.out));
}

#[test]
fn invalid_config_is_rejected_before_anything_is_written() {
    let mut config = tiny_config();
    config["dataset"]["correlation"] = json!(1.2);
    let run = Run::new(&config);
    let err = run.expect_code(&["generate"], 2);
    assert!(err.contains("correlation"), "got: {err}");
    assert!(!run.out.exists(), "a rejected run must not create output");

    // Unknown keys are config errors too, not silently ignored.
    let run = Run::new(&json!({"datasett": {}}));
    run.expect_code(&["generate"], 2);
}

#[test]
fn stale_mask_cache_is_refused_with_exit_3() {
    let run = Run::new(&tiny_config());
    run.expect_ok(&["generate"]);
    run.expect_ok(&["train-erm"]);
    run.expect_ok(&["premask"]);

    // A new base model invalidates the cached masks.
    run.expect_ok(&["--seed", "99", "--force", "train-erm"]);
    let err = run.expect_code(&["retrain"], 3);
    assert!(err.contains("stale"), "got: {err}");
    assert!(
        !run.out.join("retrain").exists(),
        "a refused retrain must not leave a stage directory"
    );

    // Refreshing the masks repairs the pipeline.
    run.expect_ok(&["--force", "premask"]);
    run.expect_ok(&["retrain"]);
}

#[test]
fn divergence_exits_4_and_leaves_no_stage_directory() {
    let mut config = tiny_config();
    config["erm"]["lr"] = json!(1e9);
    let run = Run::new(&config);
    run.expect_ok(&["generate"]);
    let err = run.expect_code(&["train-erm"], 4);
    assert!(err.contains("diverged"), "got: {err}");
    assert!(
        !run.out.join("erm").exists(),
        "failed stage directories are removed so a retry needs no --force"
    );
}

#[test]
fn knee_subcommand_agrees_with_the_library_detector() {
    let tmp = tempfile::tempdir().unwrap();

    // Steep rise that flattens at x = 0.3 (the default orientation). The
    // expected values are parsed back from the same text the binary reads,
    // so formatting cannot skew the comparison.
    let mut concave = String::from("proportion,loss\n");
    let mut xs: Vec<f64> = Vec::new();
    let mut concave_ys: Vec<f64> = Vec::new();
    for i in 0..11 {
        let x = i as f64 * 0.1;
        let row = format!("{x:.1},{:.4}", (x / 0.3).min(1.0));
        let (xs_txt, ys_txt) = row.split_once(',').unwrap();
        xs.push(xs_txt.parse().unwrap());
        concave_ys.push(ys_txt.parse().unwrap());
        concave.push_str(&row);
        concave.push('\n');
    }
    let concave_path = tmp.path().join("concave.csv");
    std::fs::write(&concave_path, &concave).unwrap();

    let expected = dac::kneedle::find_elbow(
        &dac::kneedle::CurvePoints::new(xs.clone(), concave_ys).unwrap(),
        1.0,
        false,
    )
    .unwrap();
    assert!(expected.found);

    let output = dac_bin().arg("knee").arg(&concave_path).output().unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert_eq!(
        stdout.trim(),
        format!("knee at x={} (index {})", expected.x_knee, expected.index)
    );

    // Flat-then-steep needs --rising; without it no knee is reported.
    let mut convex = String::from("x,y\n");
    let mut convex_ys: Vec<f64> = Vec::new();
    for &x in &xs {
        let row = format!("{x},{:.4}", ((x - 0.6) / 0.4).max(0.0));
        convex_ys.push(row.split_once(',').unwrap().1.parse().unwrap());
        convex.push_str(&row);
        convex.push('\n');
    }
    let convex_path = tmp.path().join("convex.csv");
    std::fs::write(&convex_path, &convex).unwrap();

    let expected = dac::kneedle::find_elbow(
        &dac::kneedle::CurvePoints::new(xs, convex_ys).unwrap(),
        1.0,
        true,
    )
    .unwrap();
    assert!(expected.found);

    let output = dac_bin()
        .arg("knee")
        .arg(&convex_path)
        .arg("--rising")
        .output()
        .unwrap();
    assert!(output.status.success());
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert_eq!(
        stdout.trim(),
        format!("knee at x={} (index {})", expected.x_knee, expected.index)
    );

    let output = dac_bin().arg("knee").arg(&convex_path).output().unwrap();
    assert!(output.status.success());
    assert_eq!(
        String::from_utf8_lossy(&output.stdout).trim(),
        "no knee found"
    );
}
