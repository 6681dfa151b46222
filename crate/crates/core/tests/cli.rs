use std::path::Path;
use std::process::{Command, Output};

use inpaint_gan::cli::{EXPERIMENT_FILE, FAILED_MARKER};
use inpaint_gan::dataset::{read_manifest, MANIFEST_FILE};
use inpaint_gan::phantom::{FIXTURE_ANNOTATIONS, FIXTURE_PATCHES, FIXTURE_SPLITS, FIXTURE_VOLUMES};
use inpaint_gan::volume_io::parse_annotations;
use tempfile::tempdir;

fn bin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_inpaint-gan"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn binary")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_fixture(root: &Path) {
    let cfg = root.join("fixture.json");
    std::fs::write(&cfg, r#"{"train": [8, 4], "val": [3, 3], "test": [3, 3]}"#).unwrap();
    let o = bin(&["make-phantom", "--config", p(&cfg), "--seed", "5", "--out", p(&root.join("fx"))]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn help_lists_subcommands() {
    let o = bin(&["--help"]);
    assert_eq!(code(&o), 0);
    let text = String::from_utf8_lossy(&o.stdout);
    for sub in ["extract-patches", "make-phantom", "train-gan", "synthesize", "train-classifier", "evaluate", "report"] {
        assert!(text.contains(sub), "missing {sub} in:\n{text}");
    }
}

#[test]
fn unknown_flag_writes_nothing() {
    let dir = tempdir().unwrap();
    let out = dir.path().join("out");
    let o = bin(&["make-phantom", "--out", p(&out), "--bogus"]);
    assert_eq!(code(&o), 1);
    assert!(!o.stderr.is_empty());
    assert!(std::fs::read_dir(dir.path()).unwrap().next().is_none());
}

#[test]
fn unknown_subcommand_is_a_validation_error() {
    assert_eq!(code(&bin(&["frobnicate"])), 1);
}

#[test]
fn missing_inputs_fail_validation_without_output() {
    let dir = tempdir().unwrap();
    let out = dir.path().join("out");
    let o = bin(&["train-gan", "--data", p(&dir.path().join("nope")), "--out", p(&out)]);
    assert_eq!(code(&o), 1);
    assert!(!out.exists());
}

#[test]
fn conflicting_regime_flags() {
    let dir = tempdir().unwrap();
    small_fixture(dir.path());
    let data = dir.path().join("fx").join(FIXTURE_PATCHES);
    let out = dir.path().join("clf");
    let o = bin(&["train-classifier", "--data", p(&data), "--regime", "raw", "--synthetic", p(&data), "--out", p(&out)]);
    assert_eq!(code(&o), 1);
    let o = bin(&["train-classifier", "--data", p(&data), "--regime", "raw-synthesis", "--out", p(&out)]);
    assert_eq!(code(&o), 1);
    assert!(!out.exists());
}

#[test]
fn extract_patches_one_row_per_annotation() {
    let dir = tempdir().unwrap();
    small_fixture(dir.path());
    let fx = dir.path().join("fx");
    let out = dir.path().join("patches");
    let o = bin(&[
        "extract-patches",
        "--annotations",
        p(&fx.join(FIXTURE_ANNOTATIONS)),
        "--volumes",
        p(&fx.join(FIXTURE_VOLUMES)),
        "--splits",
        p(&fx.join(FIXTURE_SPLITS)),
        "--config",
        p(&write_pipeline(dir.path())),
        "--out",
        p(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_manifest(&out.join(MANIFEST_FILE)).unwrap();
    let anns = parse_annotations(&fx.join(FIXTURE_ANNOTATIONS)).unwrap();
    assert_eq!(rows.len(), anns.len());
    assert_eq!(rows, read_manifest(&fx.join(FIXTURE_PATCHES).join(MANIFEST_FILE)).unwrap());
}

/// Pipeline settings matching the phantom fixture's patch geometry.
fn write_pipeline(root: &Path) -> std::path::PathBuf {
    let fixture = inpaint_gan::phantom::FixtureConfig::default();
    let path = root.join("pipeline.json");
    std::fs::write(&path, serde_json::to_string(&fixture.pipeline()).unwrap()).unwrap();
    path
}

#[test]
fn runtime_failure_leaves_marker() {
    let dir = tempdir().unwrap();
    small_fixture(dir.path());
    let data = dir.path().join("fx").join(FIXTURE_PATCHES);
    // Corrupt one patch after validation-time checks can see it exists.
    let first = read_manifest(&data.join(MANIFEST_FILE)).unwrap()[0].patch_file.clone();
    std::fs::write(data.join(&first), b"garbage").unwrap();
    let out = dir.path().join("gan");
    let o = bin(&["train-gan", "--data", p(&data), "--out", p(&out)]);
    assert_eq!(code(&o), 2);
    assert!(out.join(FAILED_MARKER).is_file());
}

#[test]
fn end_to_end_pipeline() {
    let dir = tempdir().unwrap();
    let root = dir.path();
    small_fixture(root);
    let data = root.join("fx").join(FIXTURE_PATCHES);

    let gan_cfg = root.join("gan.json");
    std::fs::write(
        &gan_cfg,
        r#"{
            "critic_steps_per_gen_step": 1, "recon_only_steps": 1, "adv_start_step": 1,
            "cls_start_step": 2, "total_steps": 3, "batch_size": 2, "checkpoint_every": 2,
            "generator": {"base_channels": 4, "depth": 2},
            "critic_local": {"base_channels": 4, "depth": 2, "input_kind": "local", "local_shape": [8, 8, 4]},
            "critic_global": {"base_channels": 4, "depth": 2, "input_kind": "global"}
        }"#,
    )
    .unwrap();
    let gan = root.join("gan");
    let o = bin(&["train-gan", "--data", p(&data), "--config", p(&gan_cfg), "--out", p(&gan)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let log = std::fs::read_to_string(gan.join("train_log.ndjson")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let syn = root.join("syn");
    let o = bin(&[
        "synthesize", "--ckpt", p(&gan.join("final")), "--source", p(&data), "--label", "malignant", "--count", "5",
        "--seed", "3", "--out", p(&syn),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_manifest(&syn.join(MANIFEST_FILE)).unwrap();
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|r| r.synthetic && r.label == inpaint_gan::ClassLabel::Malignant));

    let clf_cfg = root.join("clf.json");
    std::fs::write(&clf_cfg, r#"{"epochs": 1, "batch_size": 8}"#).unwrap();
    let mut dirs = Vec::new();
    for (regime, extra) in [("raw", None), ("raw-weighted", None), ("raw-synthesis", Some(&syn))] {
        let out = root.join(regime);
        let mut args = vec!["train-classifier", "--data", p(&data), "--regime", regime, "--config", p(&clf_cfg)];
        args.extend(["--seeds", "0", "--out", p(&out)]);
        if let Some(s) = extra {
            args.extend(["--synthetic", p(s)]);
        }
        let o = bin(&args);
        assert_eq!(code(&o), 0, "{regime}: {}", String::from_utf8_lossy(&o.stderr));
        assert!(out.join(EXPERIMENT_FILE).is_file());
        dirs.push(out);
    }

    let report = root.join("eval").join("report.json");
    let o = bin(&["evaluate", "--ckpt", p(&dirs[0].join("seed_0")), "--split", "test", "--out", p(&report)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(m["n"], 6);

    let table = root.join("table.txt");
    let mut args = vec!["report", "--out", p(&table), "--inputs"];
    args.extend(dirs.iter().map(|d| p(d)));
    let o = bin(&args);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&table).unwrap();
    for row in ["Raw ", "Raw + Weighted Loss", "Raw + Synthesis"] {
        assert!(text.contains(row), "{text}");
    }
}
