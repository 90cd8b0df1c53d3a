//! End-to-end checks of the `blocksplat` binary: exit codes, determinism of
//! generated artifacts, and the full generate/train/eval/merge/render flow
//! on a miniature configuration.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_blocksplat"))
}

fn run_ok(args: &[&str], dir: &Path) -> Output {
    let out = bin().args(args).current_dir(dir).output().expect("spawn");
    assert!(
        out.status.success(),
        "command {:?} failed ({:?}):\n{}",
        args,
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

const TINY: &[&str] = &[
    "--set",
    "scene.n_gt=6",
    "--set",
    "cameras.count=12",
    "--set",
    "cameras.resolution=[24,24]",
    "--set",
    "cameras.zoom_min=0.2",
    "--set",
    "cameras.zoom_max=0.35",
    "--set",
    "partition.nx=2",
    "--set",
    "partition.ny=1",
    "--set",
    "anchors.spacing=0.2",
    "--set",
    "anchors.k_g=2",
    "--set",
    "train.workers=2",
    "--set",
    "train.period=2",
    "--set",
    "train.iterations=6",
];

#[test]
fn full_flow_generate_train_eval_merge_render() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["generate", "--out", "ds"];
    args.extend_from_slice(TINY);
    run_ok(&args, dir.path());
    assert!(dir.path().join("ds/scene.json").exists());
    assert!(dir.path().join("ds/gt/cam_011.ppm").exists());

    let mut args = vec!["train", "--dataset", "ds", "--out", "run"];
    args.extend_from_slice(TINY);
    run_ok(&args, dir.path());
    let ckpt = "run/checkpoints/ckpt_000006.bin";
    assert!(dir.path().join(ckpt).exists());
    assert!(dir.path().join("run/metrics.csv").exists());

    let mut args = vec![
        "eval",
        "--dataset",
        "ds",
        "--checkpoint",
        ckpt,
        "--report",
        "eval.json",
    ];
    args.extend_from_slice(TINY);
    let out = run_ok(&args, dir.path());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("psnr"), "eval output: {stdout}");
    assert!(dir.path().join("eval.json").exists());

    let mut args = vec![
        "merge",
        "--dataset",
        "ds",
        "--checkpoint",
        ckpt,
        "--out",
        "merged.bin",
    ];
    args.extend_from_slice(TINY);
    run_ok(&args, dir.path());
    assert!(dir.path().join("merged.bin").exists());

    let mut args = vec![
        "render",
        "--dataset",
        "ds",
        "--checkpoint",
        ckpt,
        "--out",
        "r",
        "--camera",
        "3",
    ];
    args.extend_from_slice(TINY);
    run_ok(&args, dir.path());
    assert!(dir.path().join("r/render_003.ppm").exists());

    let mut args = vec!["partition"];
    args.extend_from_slice(TINY);
    let out = run_ok(&args, dir.path());
    assert!(String::from_utf8_lossy(&out.stdout).contains("block"));
}

#[test]
fn same_seed_gives_identical_file_hashes() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        let mut args = vec!["generate", "--out", name];
        args.extend_from_slice(TINY);
        run_ok(&args, dir.path());
    }
    for file in [
        "scene.json",
        "manifest.json",
        "gt/cam_000.ppm",
        "gt/cam_005.f64",
    ] {
        let a = std::fs::read(dir.path().join("a").join(file)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(file)).unwrap();
        assert_eq!(a, b, "{file} differs across identical runs");
    }
}

#[test]
fn validation_errors_exit_2_before_writing() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["generate", "--out", "ds", "--set", "scene.n_gt=0"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(
        !dir.path().join("ds").exists(),
        "no files may be written on validation failure"
    );

    let out = bin()
        .args(["generate", "--set", "scene.not_a_field=1"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2), "unknown keys are rejected");
}

#[test]
fn missing_files_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train", "--dataset", "nowhere", "--out", "run"];
    args.extend_from_slice(TINY);
    let out = bin().args(&args).current_dir(dir.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn eval_gt_mode_reports_cap() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["generate", "--out", "ds"];
    args.extend_from_slice(TINY);
    run_ok(&args, dir.path());
    let mut args = vec!["eval", "--dataset", "ds", "--gt"];
    args.extend_from_slice(TINY);
    let out = run_ok(&args, dir.path());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("psnr 60.000"), "gt-vs-gt eval: {stdout}");
    assert!(stdout.contains("ssim 1.0000"), "gt-vs-gt eval: {stdout}");
}

#[test]
fn gradcheck_command_passes_quickly() {
    let started = std::time::Instant::now();
    let out = bin().arg("gradcheck").output().unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(stdout.matches("PASS").count(), 3, "{stdout}");
    assert!(started.elapsed().as_secs() < 10);
}

#[test]
fn ablate_runs_matrix_and_writes_table() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("spec.json"),
        r#"{
            "name": "mini",
            "variants": [
                {"name": "independent", "overrides": {"train.mode": "independent", "weighting.enabled": false}},
                {"name": "shared", "overrides": {"train.mode": "parallel_shared", "weighting.enabled": false}}
            ],
            "seeds": [3, 4],
            "metric": "psnr_holdout"
        }"#,
    )
    .unwrap();
    let mut args = vec!["ablate", "--spec", "spec.json", "--out", "ab"];
    args.extend_from_slice(TINY);
    let out = run_ok(&args, dir.path());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(
        stdout.contains("independent") && stdout.contains("shared"),
        "{stdout}"
    );
    assert!(dir.path().join("ab/ablation.json").exists());
    assert!(dir.path().join("ab/ablation.txt").exists());

    // A one-variant spec is rejected up front.
    std::fs::write(
        dir.path().join("bad.json"),
        r#"{"name":"x","variants":[{"name":"only","overrides":{}}],"seeds":[1,2],"metric":"psnr_holdout"}"#,
    )
    .unwrap();
    let out = bin()
        .args(["ablate", "--spec", "bad.json"])
        .current_dir(dir.path())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn out_root_env_var_redirects_output() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("elsewhere");
    let mut args = vec!["generate", "--out", "ds"];
    args.extend_from_slice(TINY);
    let out = bin()
        .args(&args)
        .current_dir(dir.path())
        .env("BLOCKSPLAT_OUT_ROOT", &root)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(root.join("ds/scene.json").exists());
    assert!(!dir.path().join("ds").exists());
}
