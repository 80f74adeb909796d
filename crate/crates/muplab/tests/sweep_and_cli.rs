//! Sweep output formats and command-line interface behavior.

use muplab::instrumentation::metric_id;
use muplab::model::Activation;
use muplab::sweep::{
    run_sweep, summarize, write_records_csv, DataSpec, RuleSpec, SweepConfig,
};
use muplab::parametrization::PznKind;
use std::process::Command;

fn quick_config() -> SweepConfig {
    SweepConfig {
        widths: vec![16, 32, 64],
        seeds: vec![0, 1],
        pzn: PznKind::PaperExperimentMuP,
        rule: RuleSpec::LayerwiseSgd,
        steps: 10,
        activation: Activation::Relu,
        use_bias: false,
        hidden_layers: 2,
        sigma0: std::f64::consts::SQRT_2,
        eta0: 0.1,
        data: DataSpec::Synthetic {
            batch: 16,
            input_dim: 16,
        },
        metric_layer: 2,
    }
}

#[test]
fn csv_layout_is_stable_and_complete() {
    let records = run_sweep(&quick_config()).unwrap();
    assert_eq!(records.len(), 6);
    let mut csv_bytes = Vec::new();
    write_records_csv(&records, &mut csv_bytes).unwrap();
    let text = String::from_utf8(csv_bytes).unwrap();
    let header = text.lines().next().unwrap();
    assert!(header.starts_with("width,seed,step,diverged,flags"));
    assert!(header.contains(metric_id::FINAL_LAYER_ALIGNMENT));
    assert!(header.contains("feature_change_ratio.l2"));
    assert_eq!(text.lines().count(), 7);
}

#[test]
fn summary_contains_slope_per_metric() {
    let records = run_sweep(&quick_config()).unwrap();
    let summary = summarize(&records);
    assert_eq!(summary.total_cells, 6);
    assert_eq!(summary.diverged_cells, 0);
    for id in [
        "feature_change_ratio.l2",
        metric_id::FINAL_LAYER_ALIGNMENT,
        metric_id::UPDATE_STABLE_RANK,
    ] {
        assert!(
            summary.slopes.contains_key(id) || summary.fit_errors.contains_key(id),
            "no fit or error for {id}"
        );
    }
}

fn muplab_cmd() -> Command {
    Command::new(env!("CARGO_BIN_EXE_muplab"))
}

#[test]
fn cli_missing_config_exits_one_naming_path() {
    let out = muplab_cmd()
        .args(["sweep", "--config", "/definitely/missing.json"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("missing.json"), "stderr: {stderr}");
}

#[test]
fn cli_invalid_config_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.json");
    std::fs::write(&path, "{ not json").unwrap();
    let out = muplab_cmd()
        .args(["sweep", "--config", path.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn cli_sweep_writes_csv_and_summary_idempotently() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(
        &cfg_path,
        serde_json::to_string(&quick_config()).unwrap(),
    )
    .unwrap();
    let out_dir = dir.path().join("out");
    let run = |tag: &str| -> (Vec<u8>, Vec<u8>) {
        let out = muplab_cmd()
            .args([
                "sweep",
                "--config",
                cfg_path.to_str().unwrap(),
                "--out",
                out_dir.join(tag).to_str().unwrap(),
            ])
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0), "stderr: {}", String::from_utf8_lossy(&out.stderr));
        (
            std::fs::read(out_dir.join(tag).join("sweep.csv")).unwrap(),
            std::fs::read(out_dir.join(tag).join("summary.json")).unwrap(),
        )
    };
    let (csv_a, sum_a) = run("a");
    let (csv_b, sum_b) = run("b");
    assert_eq!(csv_a, csv_b, "sweep output not byte-identical");
    assert_eq!(sum_a, sum_b);
}

#[test]
fn cli_set_overrides_apply() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(&cfg_path, serde_json::to_string(&quick_config()).unwrap()).unwrap();
    let out_dir = dir.path().join("out");
    let out = muplab_cmd()
        .args([
            "sweep",
            "--config",
            cfg_path.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--set",
            "steps=0",
            "--set",
            "widths=[16]",
            "--seed",
            "3",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let csv = std::fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2, "one record expected: {csv}");
    assert!(lines[1].starts_with("16,3,0,"), "row: {}", lines[1]);
}

#[test]
fn cli_pzn_table_prints_scalings() {
    let out = muplab_cmd()
        .args(["pzn-table", "--widths", "3072,512,512,1", "--kind", "mup"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    // σ₁ = √(2/3072), η₃ = 0.1/512.
    let sigma1 = (2.0f64 / 3072.0).sqrt();
    assert!(
        stdout.contains(&format!("{:.6e}", sigma1)),
        "missing sigma1 {sigma1:.6e} in:\n{stdout}"
    );
    assert!(
        stdout.contains(&format!("{:.6e}", 0.1 / 512.0)),
        "missing eta3 in:\n{stdout}"
    );
}

#[test]
fn cli_selftest_passes() {
    let out = muplab_cmd().arg("selftest").output().unwrap();
    assert_eq!(
        out.status.code(),
        Some(0),
        "stdout: {}",
        String::from_utf8_lossy(&out.stdout)
    );
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("PASS"));
    assert!(!stdout.contains("FAIL"));
}

#[test]
fn cli_help_documents_subcommands() {
    let out = muplab_cmd().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&out.stdout);
    for sub in ["train", "sweep", "check-assumptions", "paths", "pzn-table", "selftest"] {
        assert!(stdout.contains(sub), "missing {sub} in help");
    }
}
