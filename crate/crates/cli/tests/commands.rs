//! Subcommands run as a real process: outputs, summaries and exit codes.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kinevae_core::data::{load_labels, save_dataset, save_labels, DatasetFormat};
use kinevae_core::{ClassNames, DanceStream, LabelRecord};
use ndarray::Array2;
use serde_json::Value;

fn kinevae(dir: &Path, args: &[&str]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_kinevae"));
    cmd.current_dir(dir).args(args);
    for (k, _) in std::env::vars() {
        if k.starts_with("KINEVAE_") {
            cmd.env_remove(k);
        }
    }
    cmd.output().expect("binary runs")
}

fn json_of(out: &Output) -> Value {
    let stdout = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(stdout.trim())
        .unwrap_or_else(|e| panic!("{e}: {stdout:?} / {}", String::from_utf8_lossy(&out.stderr)))
}

fn ok(out: &Output) -> &Output {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    out
}

/// One 100-frame stream of 3 joints with some motion.
fn write_fixture(dir: &Path) -> PathBuf {
    let frames = Array2::from_shape_fn((100, 9), |(t, c)| ((t as f64) * 0.1 + c as f64).sin() + c as f64);
    let s = DanceStream::new("s0", 3, 30.0, frames).unwrap();
    let path = dir.join("fixture.kpd");
    save_dataset(&path, &[s], DatasetFormat::Kpd1).unwrap();
    path
}

fn write_labels(dir: &Path, name: &str, records: &[LabelRecord]) -> PathBuf {
    let path = dir.join(name);
    save_labels(&path, records, &ClassNames::default()).unwrap();
    path
}

#[test]
fn prepare_reports_windows_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());
    let args = ["prepare", "--dataset", "fixture.kpd", "--out", "prep", "--json"];
    let summary = json_of(ok(&kinevae(dir.path(), &args)));
    assert_eq!(summary["total_windows"], 61);
    assert_eq!(summary["num_joints"], 3);
    assert_eq!(summary["frame_rate_hz"], 30.0);
    assert_eq!(summary["num_streams"], 1);

    let read = |name: &str| std::fs::read(dir.path().join("prep").join(name)).unwrap();
    let (kpd, manifest) = (read("normalized.kpd"), read("manifest.json"));
    ok(&kinevae(dir.path(), &args));
    assert_eq!(read("normalized.kpd"), kpd);
    assert_eq!(read("manifest.json"), manifest);

    let strided = json_of(ok(&kinevae(
        dir.path(),
        &["prepare", "--dataset", "fixture.kpd", "--stride", "10", "--json"],
    )));
    assert_eq!(strided["total_windows"], 7);
}

#[test]
fn prepare_rejects_malformed_input() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.kpd"), "not a dataset\n").unwrap();
    let out = kinevae(dir.path(), &["prepare", "--dataset", "bad.kpd"]);
    assert_eq!(out.status.code(), Some(2));
    let out = kinevae(dir.path(), &["prepare", "--dataset", "missing.kpd"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn augment_adjacent_pair_counts() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path());
    // Same-label windows at 10 and 50 touch end to end.
    write_labels(
        dir.path(),
        "pair.csv",
        &[
            LabelRecord::manual("s0", 10, 40, 2),
            LabelRecord::manual("s0", 50, 40, 2),
        ],
    );
    let out = ok(&kinevae(
        dir.path(),
        &[
            "augment",
            "--labels",
            "pair.csv",
            "--dataset",
            "fixture.kpd",
            "--radius",
            "6",
            "--json",
        ],
    ))
    .clone();
    let s = json_of(&out);
    // Starts 11..=49 are covered by both windows; extension adds 4..=9 and 51..=56.
    assert_eq!(s["by_provenance"]["between_fill"], 39);
    assert_eq!(s["by_provenance"]["frame_extension"], 12);
    assert_eq!(s["by_provenance"]["manual"], 2);
    assert_eq!(s["output_records"], 53);
    let records = load_labels(
        &dir.path().join("runs/default/labels_augmented.csv"),
        &ClassNames::default(),
    )
    .unwrap();
    let mut starts: Vec<usize> = records.iter().map(|r| r.start).collect();
    starts.sort_unstable();
    assert_eq!(starts, (4..=56).collect::<Vec<_>>());

    let total: f64 = s["by_class"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["percent"].as_f64().unwrap())
        .sum();
    assert!((total - 100.0).abs() < 1e-9);
}

#[test]
fn augment_radius_zero_without_adjacency_is_identity() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_labels(
        dir.path(),
        "sparse.csv",
        &[
            LabelRecord::manual("s0", 0, 40, 0),
            LabelRecord::manual("s0", 45, 40, 0),
            LabelRecord::manual("s1", 3, 40, 1),
        ],
    );
    ok(&kinevae(
        dir.path(),
        &[
            "augment",
            "--labels",
            "sparse.csv",
            "--radius",
            "0",
            "--output",
            "same.csv",
        ],
    ));
    assert_eq!(
        std::fs::read(dir.path().join("same.csv")).unwrap(),
        std::fs::read(input).unwrap()
    );
}

#[test]
fn augment_rejects_overlapping_manual_labels() {
    let dir = tempfile::tempdir().unwrap();
    write_labels(
        dir.path(),
        "clash.csv",
        &[
            LabelRecord::manual("s0", 0, 40, 0),
            LabelRecord::manual("s0", 20, 40, 2),
        ],
    );
    let out = kinevae(dir.path(), &["augment", "--labels", "clash.csv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("overlap"));
}

const TINY: &[&str] = &[
    "--latent-dim",
    "2",
    "--hidden-dim",
    "3",
    "--num-recurrent-layers",
    "1",
    "--classifier-hidden",
    "3",
    "--classifier-layers",
    "1",
    "--batch-size",
    "16",
    "--agreement-samples",
    "3",
    "--set",
    "data.split=[0.6, 0.2, 0.2]",
];

/// Toy corpus in `dir` plus a trained tiny checkpoint in `dir/run`.
fn toy_run(dir: &Path, epochs: &str) -> Output {
    ok(&kinevae(
        dir,
        &[
            "toy",
            "--streams",
            "6",
            "--frames-per-stream",
            "200",
            "--labeled-fraction",
            "0.025",
            "--out",
            ".",
        ],
    ));
    let mut args = vec![
        "train",
        "--dataset",
        "toy.kpd",
        "--labels",
        "toy_labels.csv",
        "--out",
        "run",
        "--epochs",
        epochs,
        "--json",
    ];
    args.extend_from_slice(TINY);
    ok(&kinevae(dir, &args)).clone()
}

#[test]
fn zero_epochs_writes_only_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let s = json_of(&toy_run(dir.path(), "0"));
    assert_eq!(s["epochs"], 0);
    let run = dir.path().join("run");
    let mut names: Vec<String> = std::fs::read_dir(&run)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["config.toml", "last.ckpt", "metrics.ndjson"]);
    assert!(std::fs::read(run.join("metrics.ndjson")).unwrap().is_empty());
}

#[test]
fn non_finite_training_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    ok(&kinevae(
        dir.path(),
        &[
            "toy",
            "--streams",
            "6",
            "--frames-per-stream",
            "200",
            "--labeled-fraction",
            "0.025",
            "--out",
            ".",
        ],
    ));
    let mut args = vec![
        "train",
        "--dataset",
        "toy.kpd",
        "--labels",
        "toy_labels.csv",
        "--epochs",
        "5",
        "--learning-rate",
        "1e200",
    ];
    args.extend_from_slice(TINY);
    let out = kinevae(dir.path(), &args);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
}

#[test]
fn generate_and_evaluate_from_a_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    toy_run(d, "2");
    let gen = |out: &str| {
        json_of(ok(&kinevae(
            d,
            &[
                "generate",
                "--config",
                "run/config.toml",
                "--label",
                "High",
                "--count",
                "75",
                "--output",
                out,
                "--json",
            ],
        )))
    };
    let s = gen("a/high");
    assert_eq!((s["label"].as_str(), s["count"].as_u64()), (Some("high"), Some(75)));
    let sidecar = std::fs::read_to_string(d.join("a/high.csv")).unwrap();
    let rows: Vec<&str> = sidecar.lines().skip(1).collect();
    assert_eq!(rows.len(), 75);
    assert!(rows.iter().all(|r| r.split(',').nth(1) == Some("high")));
    gen("b/high");
    for ext in ["kpd", "csv"] {
        let read = |p: &str| std::fs::read(d.join(format!("{p}.{ext}"))).unwrap();
        assert_eq!(read("a/high"), read("b/high"));
    }

    let out = kinevae(d, &["generate", "--config", "run/config.toml", "--label", "extreme"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("low, medium, high"), "{err}");

    let report = json_of(ok(&kinevae(
        d,
        &[
            "evaluate",
            "--config",
            "run/config.toml",
            "--counts",
            "75,75,75",
            "--num-pairs",
            "500",
            "--json",
        ],
    )));
    assert_eq!(report["num_generated"], 225);
    let ratio = report["diversity_ratio"].as_f64().unwrap();
    assert!(ratio.is_finite() && ratio > 0.0);
    assert!(d.join("run/eval_report.json").exists());

    let out = kinevae(
        d,
        &[
            "evaluate",
            "--config",
            "run/config.toml",
            "--checkpoint",
            "run/nope.ckpt",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn every_subcommand_speaks_json_on_failure_too() {
    let dir = tempfile::tempdir().unwrap();
    let out = kinevae(dir.path(), &["train", "--json"]);
    assert_eq!(out.status.code(), Some(2));
    let v = json_of(&out);
    assert_eq!(v["exit_code"], 2);
    assert!(v["error"].as_str().unwrap().contains("dataset"));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(kinevae(dir.path(), &[]).status.code(), Some(2));
    assert_eq!(
        kinevae(dir.path(), &["train", "--epochs", "many"]).status.code(),
        Some(2)
    );
    assert_eq!(kinevae(dir.path(), &["--help"]).status.code(), Some(0));
}
