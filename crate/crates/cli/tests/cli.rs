use std::path::Path;
use std::process::{Command, Output};

fn romnisweep(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_romnisweep"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

const TINY: &str = r#"{
  "rig": {"image_size": [32, 32]},
  "sweep": {"num_spheres": 16, "out_width": 32, "out_height": 8},
  "model": {"base_channels": 2, "feature_blocks": 1, "iterations": 3},
  "train": {"steps": 4, "checkpoint_every": 0, "log_every": 0},
  "data": {"dir": "data", "train_scenes": 2, "test_scenes": 1, "preset": "easy"}
}"#;

#[test]
fn unknown_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = romnisweep(&["train", "--no-such-flag"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let out = romnisweep(&["eval", "--fusion", "sideways", "--checkpoint", "x"], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let out = romnisweep(&["eval", "--checkpoint", "missing.rsg"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
    let out = romnisweep(&["gen-data", "--set", "sweep.nonsense=1"], dir.path());
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn self_test_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(romnisweep(&["self-test"], dir.path()));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().count() >= 5);
    assert!(!text.contains("FAIL"));
}

#[test]
fn generate_train_evaluate_infer_export() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("tiny.json"), TINY).unwrap();
    ok(romnisweep(&["gen-data", "--config", "tiny.json"], d));
    assert!(d.join("data/manifest.json").exists());
    ok(romnisweep(&["train", "--config", "tiny.json", "--out", "run"], d));
    assert!(d.join("run/checkpoint.rsg").exists());
    assert!(d.join("run/config.json").exists());

    let out = ok(romnisweep(&["eval", "--checkpoint", "run/checkpoint.rsg"], d));
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for key in ["gt1", "gt3", "gt5", "mae", "rms"] {
        assert!(report["aggregate"][key].is_number(), "aggregate.{key}");
        assert!(report["scenes"][0][key].is_number(), "scenes[0].{key}");
    }
    assert!(report["scenes"][0]["scene"].is_number());
    assert_eq!(report["per_iteration_mae"].as_array().unwrap().len(), 3);

    // a different architecture is refused
    let out = romnisweep(
        &[
            "eval",
            "--checkpoint",
            "run/checkpoint.rsg",
            "--set",
            "model.base_channels=4",
        ],
        d,
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("incompatible"));

    ok(romnisweep(
        &[
            "infer",
            "--checkpoint",
            "run/checkpoint.rsg",
            "--scene",
            "2",
            "--out",
            "inf",
        ],
        d,
    ));
    for f in [
        "depth.pfm",
        "depth.png",
        "gt.png",
        "err_iter1.png",
        "err_iter2.png",
        "err_iter3.png",
    ] {
        assert!(d.join("inf").join(f).exists(), "{f} missing");
    }
    assert!(!d.join("inf/err_iter4.png").exists());
    let img = image::open(d.join("inf/err_iter3.png")).unwrap();
    assert_eq!((img.width(), img.height()), (32, 8));

    ok(romnisweep(
        &[
            "export-cloud",
            "--checkpoint",
            "run/checkpoint.rsg",
            "--depth",
            "inf/depth.pfm",
            "--rgb",
            "inf/depth.png",
            "--ascii",
            "--index-floor",
            "0",
            "--out",
            "cloud.ply",
        ],
        d,
    ));
    let ply = std::fs::read_to_string(d.join("cloud.ply")).unwrap();
    assert!(ply.starts_with("ply\nformat ascii 1.0\n"));
    assert!(ply.contains("property uchar red"));
    assert!(ply.contains("element vertex 256\n"));
}
