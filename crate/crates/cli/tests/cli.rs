//! End-to-end runs of the `advseg` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn advseg(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_advseg"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn advseg")
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Small dataset + training config pair for fast end-to-end runs.
fn write_tiny_configs(dir: &Path) -> (PathBuf, PathBuf) {
    let synth = serde_json::json!({
        "extent": 25,
        "source_cases": 2,
        "target_cases": 2,
        "seed": 11,
    });
    let synth_path = dir.join("synth.json");
    std::fs::write(&synth_path, synth.to_string()).unwrap();

    let train = serde_json::json!({
        "mode": "uda",
        "manifest": "data/manifest.json",
        "seg_spec": {
            "in_channels": 2,
            "classes": 2,
            "pathway_layers": [
                {"fm_count": 2, "kernel": 3},
                {"fm_count": 2, "kernel": 3}
            ],
            "downsample_factor": 3,
            "hidden_layers": [{"fm_count": 3, "kernel": 1}],
            "activation_slope": 0.01,
            "normal_input_extent": 13,
            "low_input_extent": 7
        },
        "disc_spec": {
            "conv_layers": [
                {"fm_count": 4, "kernel": 3},
                {"fm_count": 4, "kernel": 3},
                {"fm_count": 4, "kernel": 3},
                {"fm_count": 4, "kernel": 3}
            ]
        },
        "schedule": {
            "e1": 1,
            "e2": 2,
            "refine_start": 2,
            "total_epochs": 2,
            "batches_per_epoch": 1,
            "n_seg": 2,
            "n_adv": 2
        },
        "probe_samples": 4,
        "val_every": 0,
        "tile_extent": 25,
    });
    let train_path = dir.join("train.json");
    std::fs::write(&train_path, train.to_string()).unwrap();
    (synth_path, train_path)
}

#[test]
fn gen_data_same_seed_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (synth, _) = write_tiny_configs(dir.path());
    for out in ["a", "b"] {
        let r = advseg(
            dir.path(),
            &["gen-data", "--config", synth.to_str().unwrap(), "--seed", "7", "--out", out],
        );
        assert_ok(&r);
        assert!(stdout(&r).contains("manifest.json"));
    }
    for name in ["manifest.json", "s01.raw", "t02_labels.raw", "run.json"] {
        let a = std::fs::read(dir.path().join("a").join(name)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical-seed runs");
    }
}

#[test]
fn train_eval_probe_roundtrip_and_replay() {
    let dir = tempfile::tempdir().unwrap();
    let (synth, train) = write_tiny_configs(dir.path());
    assert_ok(&advseg(
        dir.path(),
        &["gen-data", "--config", synth.to_str().unwrap(), "--out", "data"],
    ));

    let r = advseg(
        dir.path(),
        &["train", "--config", train.to_str().unwrap(), "--alpha-max", "0.07", "--out", "run"],
    );
    assert_ok(&r);
    let csv = std::fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap();
    assert!(csv.starts_with("epoch,L_seg,L_adv,alpha"));
    // The peak weight from the flag shows up at e2.
    let last = csv.lines().last().unwrap();
    assert!(last.contains(",0.070000,"), "alpha_max override missing from {last}");

    // Replaying the recorded run file reproduces the metrics byte for byte.
    let r = advseg(dir.path(), &["train", "--config", "run/run.json", "--out", "replay"]);
    assert_ok(&r);
    assert_eq!(
        std::fs::read(dir.path().join("run/metrics.csv")).unwrap(),
        std::fs::read(dir.path().join("replay/metrics.csv")).unwrap()
    );

    let r = advseg(
        dir.path(),
        &[
            "eval",
            "--checkpoint",
            "run/checkpoint-final",
            "--manifest",
            "data/manifest.json",
            "--out",
            "eval",
        ],
    );
    assert_ok(&r);
    assert!(stdout(&r).contains("dsc"));
    let eval_csv = std::fs::read_to_string(dir.path().join("eval/metrics.csv")).unwrap();
    assert!(eval_csv.lines().count() >= 4);

    let r = advseg(
        dir.path(),
        &[
            "probe",
            "--checkpoint",
            "run/checkpoint-final",
            "--manifest",
            "data/manifest.json",
            "--n-samples",
            "8",
            "--out",
            "probe",
        ],
    );
    assert_ok(&r);
    assert!(stdout(&r).contains("domain accuracy"));
    assert!(dir.path().join("probe/run.json").exists());
}

#[test]
fn source_only_emits_no_discriminator_and_taps_narrow_the_probe_input() {
    let dir = tempfile::tempdir().unwrap();
    let (synth, train) = write_tiny_configs(dir.path());
    assert_ok(&advseg(
        dir.path(),
        &["gen-data", "--config", synth.to_str().unwrap(), "--out", "data"],
    ));

    let r = advseg(
        dir.path(),
        &[
            "train",
            "--config",
            train.to_str().unwrap(),
            "--mode",
            "source-only",
            "--out",
            "src",
        ],
    );
    assert_ok(&r);
    let manifest =
        std::fs::read_to_string(dir.path().join("src/checkpoint-final/manifest.json")).unwrap();
    assert!(manifest.contains("seg."));
    assert!(!manifest.contains("disc."), "source-only run wrote discriminator params");

    // `--taps L2` leaves only the two layer-2 feature maps per pathway,
    // visible as the discriminator's input channel count.
    let r = advseg(
        dir.path(),
        &["train", "--config", train.to_str().unwrap(), "--taps", "L2", "--out", "narrow"],
    );
    assert_ok(&r);
    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("narrow/checkpoint-final/manifest.json"))
            .unwrap(),
    )
    .unwrap();
    let shape = manifest["params"]
        .as_array()
        .unwrap()
        .iter()
        .find(|p| p["name"] == "disc.layer1.kernels")
        .expect("disc layer1")["shape"]
        .as_array()
        .unwrap();
    assert_eq!(shape[1], 4, "expected 2 maps x 2 pathways as input channels");
}

#[test]
fn config_failures_exit_2_and_runtime_failures_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let (synth, train) = write_tiny_configs(dir.path());

    // Missing config file.
    let r = advseg(dir.path(), &["train", "--config", "nope.json", "--out", "x"]);
    assert_eq!(r.status.code(), Some(2), "{}", stderr(&r));

    // Bad mode string.
    assert_ok(&advseg(
        dir.path(),
        &["gen-data", "--config", synth.to_str().unwrap(), "--out", "data"],
    ));
    let r = advseg(
        dir.path(),
        &["train", "--config", train.to_str().unwrap(), "--mode", "both", "--out", "x"],
    );
    assert_eq!(r.status.code(), Some(2));
    assert!(stderr(&r).contains("unknown mode"));

    // Schedule that cannot hold: epochs below the ramp end.
    let r = advseg(
        dir.path(),
        &["train", "--config", train.to_str().unwrap(), "--epochs", "1", "--out", "x"],
    );
    assert_eq!(r.status.code(), Some(2), "{}", stderr(&r));

    // A run.json from another command is refused.
    let r = advseg(dir.path(), &["train", "--config", "data/run.json", "--out", "x"]);
    assert_eq!(r.status.code(), Some(2));
    assert!(stderr(&r).contains("gen-data"));

    // Probe sample count of zero.
    assert_ok(&advseg(dir.path(), &["train", "--config", train.to_str().unwrap(), "--out", "run"]));
    let r = advseg(
        dir.path(),
        &[
            "probe",
            "--checkpoint",
            "run/checkpoint-final",
            "--manifest",
            "data/manifest.json",
            "--n-samples",
            "0",
            "--out",
            "p",
        ],
    );
    assert_eq!(r.status.code(), Some(2), "{}", stderr(&r));

    // Eval over a manifest with no cases is a runtime failure.
    std::fs::write(dir.path().join("empty.json"), "[]").unwrap();
    let r = advseg(
        dir.path(),
        &[
            "eval",
            "--checkpoint",
            "run/checkpoint-final",
            "--manifest",
            "empty.json",
            "--out",
            "e",
        ],
    );
    assert_eq!(r.status.code(), Some(3), "{}", stderr(&r));
    assert!(stderr(&r).contains("no labelled cases"));

    // Unwritable output directory names the path.
    std::fs::write(dir.path().join("blocker"), "").unwrap();
    let r = advseg(
        dir.path(),
        &["gen-data", "--config", synth.to_str().unwrap(), "--out", "blocker/sub"],
    );
    assert_eq!(r.status.code(), Some(3), "{}", stderr(&r));
    assert!(stderr(&r).contains("blocker"));
}
