use std::path::Path;
use std::process::{Command, Output};

use instpaint::io::{read_augmented, read_ground_truth};
use instpaint::scene::Box3D;

fn instpaint(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_instpaint"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = instpaint(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: [&str; 6] = ["--set", "rig.width=320", "--set", "rig.height=180", "--set", "synth.density=0.3"];

fn synth(dir: &Path, seed: &str) {
    let mut args = vec!["synth", "--out", s(dir), "--boxes", "4", "--seed", seed];
    args.extend(SMALL);
    ok(&args);
}

#[test]
fn stepwise_commands_match_pipeline() {
    let d = tempfile::tempdir().unwrap();
    let scene = d.path().join("scene");
    synth(&scene, "3");
    for f in ["calibration.json", "labels.json", "sweeps.json", "sweep_00.bin", "gt.json", "masks/cam_5.pgm", "masks/cam_5.json"] {
        assert!(scene.join(f).exists(), "{f} missing");
    }

    let step = d.path().join("step");
    ok(&["paint", "--scene", s(&scene), "--out", s(&step)]);
    ok(&[
        "refine",
        "--scene",
        s(&scene),
        "--priors",
        s(&step.join("raw_priors.json")),
        "--out",
        s(&step),
    ]);
    let full = d.path().join("full");
    let report = ok(&["pipeline", "--scene", s(&scene), "--out", s(&full)]);
    assert!(report.contains("label_accuracy"));

    let a = std::fs::read(step.join("augmented.bin")).unwrap();
    let b = std::fs::read(full.join("augmented.bin")).unwrap();
    assert_eq!(a, b);
    assert!(full.join("metrics.json").exists());

    let eval = ok(&[
        "eval",
        "--scene",
        s(&scene),
        "--input",
        s(&full.join("augmented.bin")),
        "--priors",
        s(&full.join("priors.json")),
    ]);
    let m: serde_json::Value = serde_json::from_str(&eval).unwrap();
    let acc = m["label_accuracy"]["value"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn fuse_writes_features_and_summary() {
    let d = tempfile::tempdir().unwrap();
    let scene = d.path().join("scene");
    synth(&scene, "5");
    let out = d.path().join("out");
    ok(&["pipeline", "--scene", s(&scene), "--out", s(&out)]);
    let feats = d.path().join("feat.bin");
    ok(&["fuse", "--input", s(&out.join("augmented.bin")), "--out", s(&feats)]);
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(feats.with_extension("json")).unwrap()).unwrap();
    let n = summary["points"].as_u64().unwrap() as usize;
    let dim = summary["dim"].as_u64().unwrap() as usize;
    assert_eq!(std::fs::metadata(&feats).unwrap().len() as usize, n * dim * 4);
    assert_eq!(summary["grid"], serde_json::json!([512, 512, 1]));
}

#[test]
fn false_positive_database_flow() {
    let d = tempfile::tempdir().unwrap();
    let scene = d.path().join("scene");
    synth(&scene, "9");
    let gt = read_ground_truth(&scene).unwrap();
    // one true detection and two spurious ones on open ground
    let dets = vec![
        gt.boxes[0],
        Box3D::new([-40.0, 40.0, 0.5], [2.0, 2.0, 1.0], 0.0, 1),
        Box3D::new([-45.0, -45.0, 0.5], [2.0, 2.0, 1.0], 0.3, 1),
    ];
    let det_path = d.path().join("dets.json");
    std::fs::write(&det_path, serde_json::to_string(&dets).unwrap()).unwrap();
    let db = d.path().join("db");
    let built = ok(&["augment-fp", "build", "--scene", s(&scene), "--detections", s(&det_path), "--db", s(&db)]);
    assert!(built.contains("mined 2 of 3"), "{built}");

    let out = d.path().join("out");
    ok(&["pipeline", "--scene", s(&scene), "--out", s(&out)]);
    let input = out.join("augmented.bin");
    let pasted = [d.path().join("p1.bin"), d.path().join("p2.bin")];
    for p in &pasted {
        ok(&[
            "augment-fp",
            "paste",
            "--input",
            s(&input),
            "--db",
            s(&db),
            "--scene",
            s(&scene),
            "--count",
            "2",
            "--out",
            s(p),
            "--seed",
            "4",
        ]);
    }
    assert_eq!(std::fs::read(&pasted[0]).unwrap(), std::fs::read(&pasted[1]).unwrap());
    let before = read_augmented(&input).unwrap();
    let after = read_augmented(&pasted[0]).unwrap();
    assert!(after.len() >= before.len());
    assert_eq!(&after[..before.len()], &before[..]);
}

#[test]
fn failures_are_tagged_and_exit_nonzero() {
    let d = tempfile::tempdir().unwrap();
    let scene = d.path().join("scene");
    synth(&scene, "1");
    std::fs::remove_file(scene.join("masks/cam_2.pgm")).unwrap();
    let out = instpaint(&["pipeline", "--scene", s(&scene), "--out", s(&d.path().join("o"))]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("[load]"), "{err}");
    assert!(err.contains("cam_2.pgm"), "{err}");

    let out = instpaint(&["synth", "--out", s(d.path()), "--set", "refiner.bogus=1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("[config]"));
}

#[test]
fn config_file_is_honoured() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("run.toml");
    std::fs::write(
        &cfg,
        "seed = 11\n[rig]\nwidth = 320\nheight = 180\ncameras = 4\nhfov_deg = 100.0\n[synth]\nbox_count = 3\ndensity = 0.3\n",
    )
    .unwrap();
    let scene = d.path().join("scene");
    let msg = ok(&["--config", s(&cfg), "synth", "--out", s(&scene)]);
    assert!(msg.contains("3 boxes, 4 cameras"), "{msg}");
}
