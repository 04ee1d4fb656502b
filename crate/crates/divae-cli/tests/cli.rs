//! End-to-end pipeline runs through the installed binary.

use std::path::Path;
use std::process::Command;

fn divae() -> Command {
    Command::new(env!("CARGO_BIN_EXE_divae"))
}

fn write_tiny_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("tiny.cfg");
    let text = "\
# workstation smoke configuration
synth_dim = 8
synth_components = 3
prior_components = 3
n_train = 96
n_val = 24
epochs = 2
batch_size = 32
hidden = 4
teacher_k_max = 8
eval_mc_coverage = 1000
eval_mc_posterior = 8
method = direct
seeds = 0,1
";
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn pipeline_smoke_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out = dir.path().join("out");

    for stage in ["gen-data", "estimate", "train", "eval", "report"] {
        let mut cmd = divae();
        cmd.arg(stage).arg("--config").arg(&cfg).arg("--out").arg(&out);
        if stage == "train" {
            cmd.args(["--jobs", "2"]);
        }
        let output = cmd.output().unwrap();
        assert!(
            output.status.success(),
            "{stage} failed:\nstdout: {}\nstderr: {}",
            String::from_utf8_lossy(&output.stdout),
            String::from_utf8_lossy(&output.stderr)
        );
    }

    assert!(out.join("data/seed0/train.divd").exists());
    assert!(out.join("runs/gmm-direct-seed0/checkpoint.divm").exists());
    assert!(out.join("runs/gmm-direct-seed1/metrics.csv").exists());
    assert!(out.join("report.csv").exists());

    // Report shows 2 per-seed rows + 1 aggregate row for the single group.
    let report = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 4, "{report}");
}

#[test]
fn config_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.cfg");
    std::fs::write(&path, "definitely_not_a_key = 1\nlr = -3\n").unwrap();
    let output = divae().arg("gen-data").arg("--config").arg(&path).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("definitely_not_a_key"), "{stderr}");
    assert!(stderr.contains("lr must be positive"), "{stderr}");
}

#[test]
fn missing_upstream_stage_is_actionable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out = dir.path().join("fresh");
    let output = divae()
        .arg("train")
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(output.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(stderr.contains("gen-data"), "{stderr}");
}

#[test]
fn determinism_same_seed_same_metrics_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());

    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        for stage in ["gen-data", "estimate", "train", "eval"] {
            let status = divae()
                .arg(stage)
                .arg("--config")
                .arg(&cfg)
                .arg("--seed")
                .arg("0")
                .arg("--out")
                .arg(&out)
                .status()
                .unwrap();
            assert!(status.success(), "{stage} failed in {run}");
        }
        outputs.push(std::fs::read(out.join("runs/gmm-direct-seed0/metrics.csv")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1], "metrics.csv differs between identical runs");
}

#[test]
fn ood_command_reports_shifts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out = dir.path().join("out");
    for stage in ["gen-data", "estimate", "train", "eval"] {
        let status = divae()
            .arg(stage)
            .arg("--config")
            .arg(&cfg)
            .arg("--seed")
            .arg("0")
            .arg("--out")
            .arg(&out)
            .status()
            .unwrap();
        assert!(status.success(), "{stage} failed");
    }
    // OOD data with a different component count.
    let ood_cfg_path = dir.path().join("ood.cfg");
    std::fs::write(
        &ood_cfg_path,
        "synth_dim = 8\nsynth_components = 5\nn_train = 48\nn_val = 24\nseeds = 0\nteacher_k_max = 8\n",
    )
    .unwrap();
    let ood_out = dir.path().join("ood");
    assert!(divae()
        .arg("gen-data")
        .arg("--config")
        .arg(&ood_cfg_path)
        .arg("--out")
        .arg(&ood_out)
        .status()
        .unwrap()
        .success());

    let output = divae()
        .arg("ood")
        .arg("--config")
        .arg(&cfg)
        .arg("--seed")
        .arg("0")
        .arg("--out")
        .arg(&out)
        .arg("--ood-dataset")
        .arg(ood_out.join("data/seed0/val.divd"))
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "ood failed: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("d_elbo"), "{stdout}");
    assert!(out.join("runs/gmm-direct-seed0/ood-metrics.csv").exists());
}

#[test]
fn timing_command_prints_three_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_tiny_config(dir.path());
    let out = dir.path().join("t");
    let output = divae()
        .arg("timing")
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .args(["--epochs", "1"])
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "timing failed: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let stdout = String::from_utf8_lossy(&output.stdout);
    for m in ["none", "direct", "flow"] {
        assert!(stdout.contains(m), "{stdout}");
    }
    assert!(out.join("timing.csv").exists());
}
