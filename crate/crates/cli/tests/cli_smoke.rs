//! End-to-end exercises of the `survgrid` binary: every subcommand, the
//! artifacts each one writes, and the error paths a user can hit from the
//! command line.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use survgrid_core::diffcore::Array;
use survgrid_core::hazardheads::{write_predictions, HazardGrid};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_survgrid"))
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawning survgrid");
    assert!(
        out.status.success(),
        "survgrid {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn run_fail(args: &[&str]) -> String {
    let out = bin().args(args).output().expect("spawning survgrid");
    assert!(
        !out.status.success(),
        "survgrid {args:?} unexpectedly succeeded"
    );
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("survgrid_cli_{name}"));
    if dir.exists() {
        fs::remove_dir_all(&dir).unwrap();
    }
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap_or_else(|e| panic!("reading {}: {e}", path.display()))
}

/// Generate a small, mildly censored cohort into `dir/data`.
fn synth_small(dir: &Path, seed: u64, subjects: usize, intervals: usize) -> PathBuf {
    let data = dir.join("data");
    run(&[
        "synth",
        "--seed",
        &seed.to_string(),
        "--set",
        &format!("subjects={subjects}"),
        "--set",
        &format!("intervals={intervals}"),
        "--set",
        "base_hazard=0.06",
        "--set",
        "censor_hazard=0.06",
        "--out",
        data.to_str().unwrap(),
    ]);
    data
}

#[test]
fn synth_writes_a_complete_dataset_directory() {
    let dir = scratch("synth_dataset");
    let data = synth_small(&dir, 1, 80, 10);

    for file in [
        "observations.csv",
        "outcomes.csv",
        "schema.csv",
        "truth.csv",
        "dataset.cfg",
    ] {
        assert!(data.join(file).exists(), "missing {file}");
    }
    let outcomes = read(&data.join("outcomes.csv"));
    assert_eq!(outcomes.lines().count(), 81, "header plus one row per subject");
    assert_eq!(outcomes.lines().next(), Some("subject_id,event_time,event_cause"));
    let cfg = read(&data.join("dataset.cfg"));
    assert!(cfg.contains("intervals=10") && cfg.contains("causes=2"), "{cfg}");
}

#[test]
fn synth_is_seed_deterministic() {
    let dir = scratch("synth_seeds");
    let a = synth_small(&dir.join("a"), 9, 60, 8);
    let b = synth_small(&dir.join("b"), 9, 60, 8);
    let c = synth_small(&dir.join("c"), 10, 60, 8);

    for file in ["observations.csv", "outcomes.csv", "schema.csv", "truth.csv"] {
        assert_eq!(
            fs::read(a.join(file)).unwrap(),
            fs::read(b.join(file)).unwrap(),
            "{file} differs across identical seeds"
        );
    }
    assert_ne!(
        fs::read(a.join("outcomes.csv")).unwrap(),
        fs::read(c.join("outcomes.csv")).unwrap(),
        "different seeds should change the cohort"
    );
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = scratch("bad_key");
    let stderr = run_fail(&[
        "synth",
        "--set",
        "nonsense=1",
        "--out",
        dir.join("data").to_str().unwrap(),
    ]);
    assert!(stderr.contains("nonsense"), "stderr: {stderr}");
}

#[test]
fn malformed_config_file_is_rejected_with_line() {
    let dir = scratch("bad_config");
    let cfg = dir.join("run.cfg");
    fs::write(&cfg, "epochs=2\nbatch_size\n").unwrap();
    let stderr = run_fail(&[
        "synth",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        dir.join("data").to_str().unwrap(),
    ]);
    assert!(stderr.contains("run.cfg:2"), "stderr: {stderr}");
}

#[test]
fn train_writes_checkpoint_and_log() {
    let dir = scratch("train_artifacts");
    let data = synth_small(&dir, 2, 120, 10);
    let out = dir.join("run");
    run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "2",
        "--set",
        "epochs=2",
        "--set",
        "batch_size=32",
        "--horizon",
        "6",
    ]);

    assert!(out.join("checkpoint.txt").exists());
    let log = read(&out.join("training_log.csv"));
    assert_eq!(log.lines().next(), Some("epoch,train_loss,val_loss,lr,seconds"));
    assert!(log.lines().count() >= 3, "expected at least two epochs logged:\n{log}");
}

#[test]
fn ablation_flags_change_the_trained_model() {
    let dir = scratch("ablations");
    let data = synth_small(&dir, 3, 100, 10);
    let mut checkpoints = Vec::new();
    for (name, flag) in [("full", None), ("no_fa", Some("--no-fa")), ("no_cet", Some("--no-cet"))] {
        let out = dir.join(name);
        let mut args = vec![
            "train",
            "--data",
            data.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--seed",
            "3",
            "--set",
            "epochs=1",
            "--horizon",
            "5",
        ];
        if let Some(f) = flag {
            args.push(f);
        }
        run(&args);
        checkpoints.push(fs::read(out.join("checkpoint.txt")).unwrap());
    }
    assert_ne!(checkpoints[0], checkpoints[1], "--no-fa left the model unchanged");
    assert_ne!(checkpoints[0], checkpoints[2], "--no-cet left the model unchanged");
}

#[test]
fn train_on_missing_dataset_fails_cleanly() {
    let dir = scratch("train_missing");
    let stderr = run_fail(&[
        "train",
        "--data",
        dir.join("nowhere").to_str().unwrap(),
        "--out",
        dir.join("run").to_str().unwrap(),
    ]);
    assert!(stderr.starts_with("error:"), "stderr: {stderr}");
}

#[test]
fn predict_emits_conserved_grids_and_is_repeatable() {
    let dir = scratch("predict_grids");
    let data = synth_small(&dir, 4, 120, 10);
    let run_dir = dir.join("run");
    run(&[
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
        "--seed",
        "4",
        "--set",
        "epochs=2",
        "--horizon",
        "6",
    ]);
    let checkpoint = run_dir.join("checkpoint.txt");
    let args = |out: &Path| {
        vec![
            "predict".to_string(),
            "--data".into(),
            data.to_str().unwrap().into(),
            "--checkpoint".into(),
            checkpoint.to_str().unwrap().into(),
            "--out".into(),
            out.to_str().unwrap().into(),
            "--tau".into(),
            "1".into(),
        ]
    };
    let first = dir.join("pred_a");
    let again = dir.join("pred_b");
    run(&args(&first).iter().map(String::as_str).collect::<Vec<_>>());
    run(&args(&again).iter().map(String::as_str).collect::<Vec<_>>());

    let text = read(&first.join("predictions.csv"));
    let mut rows = 0usize;
    let mut last: Option<(String, usize, f64, f64)> = None;
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f.len(), 6, "row {line}");
        let (id, offset) = (f[0].to_string(), f[1].parse::<usize>().unwrap());
        let hazard: f64 = f[3].parse().unwrap();
        let cif: f64 = f[4].parse().unwrap();
        let survival: f64 = f[5].parse().unwrap();
        assert!(hazard > 0.0 && hazard < 1.0);
        match last.take() {
            // second cause row of the same (subject, interval): check mass
            Some((pid, poff, pcif, psurv)) if pid == id && poff == offset => {
                assert_eq!(psurv, survival, "survival must match within an interval");
                assert!(
                    (pcif + cif + survival - 1.0).abs() < 1e-9,
                    "mass not conserved for {id} at offset {offset}"
                );
            }
            _ => last = Some((id, offset, cif, survival)),
        }
        rows += 1;
    }
    assert!(rows > 0 && rows % 12 == 0, "rows = subjects x 6 offsets x 2 causes, got {rows}");
    assert_eq!(
        fs::read(first.join("predictions.csv")).unwrap(),
        fs::read(again.join("predictions.csv")).unwrap(),
        "repeated predict runs must be byte-identical"
    );
}

/// Dataset directory with only what `evaluate` needs: outcomes + metadata.
fn write_eval_dataset(dir: &Path, outcomes: &str, intervals: usize, causes: usize) {
    fs::create_dir_all(dir).unwrap();
    fs::write(dir.join("outcomes.csv"), outcomes).unwrap();
    fs::write(
        dir.join("dataset.cfg"),
        format!("intervals={intervals}\ncauses={causes}\ngrid_width=1\n"),
    )
    .unwrap();
}

fn constant_hazard_grid(hazard: f64, h: usize) -> HazardGrid {
    let logit = (hazard / (1.0 - hazard)).ln();
    HazardGrid::from_logits(&Array::full(&[h, 1], logit)).unwrap()
}

#[test]
fn evaluate_scores_a_perfect_ranking_at_unit_concordance() {
    let dir = scratch("evaluate_perfect");
    let data = dir.join("data");
    write_eval_dataset(
        &data,
        "subject_id,event_time,event_cause\n\
         s1,1.5,1\n\
         s2,2.5,1\n\
         s3,4.5,1\n\
         s4,5.5,0\n",
        6,
        1,
    );
    // Higher constant hazard for earlier events: every comparable pair agrees.
    let preds = vec![
        ("s1".to_string(), constant_hazard_grid(0.5, 5)),
        ("s2".to_string(), constant_hazard_grid(0.3, 5)),
        ("s3".to_string(), constant_hazard_grid(0.1, 5)),
        ("s4".to_string(), constant_hazard_grid(0.05, 5)),
    ];
    let pred_path = dir.join("predictions.csv");
    write_predictions(&pred_path, &preds).unwrap();

    // Events at intervals 2, 3, 5 become 1, 2, 4 relative to the landmark.
    let out = dir.join("eval");
    run(&[
        "evaluate",
        "--predictions",
        pred_path.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--tau",
        "1",
        "--bins",
        "2",
    ]);
    let metrics = read(&out.join("metrics.csv"));
    let ctd_line = metrics
        .lines()
        .find(|l| l.starts_with("1,ctd,"))
        .unwrap_or_else(|| panic!("no ctd row in:\n{metrics}"));
    let ctd: f64 = ctd_line.rsplit(',').next().unwrap().parse().unwrap();
    assert_eq!(ctd, 1.0, "metrics:\n{metrics}");
    assert!(out.join("calibration_1.csv").exists());
}

#[test]
fn evaluate_rejects_an_empty_predictions_file() {
    let dir = scratch("evaluate_empty");
    let data = dir.join("data");
    write_eval_dataset(&data, "subject_id,event_time,event_cause\ns1,1.5,1\n", 6, 1);
    let pred_path = dir.join("predictions.csv");
    fs::write(&pred_path, "subject_id,interval_offset,cause,hazard,cif,survival\n").unwrap();
    let stderr = run_fail(&[
        "evaluate",
        "--predictions",
        pred_path.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--out",
        dir.join("eval").to_str().unwrap(),
    ]);
    assert!(stderr.contains("no prediction rows"), "stderr: {stderr}");
}

#[test]
fn crossval_writes_folds_and_averages_them() {
    let dir = scratch("crossval");
    let data = synth_small(&dir, 5, 100, 8);
    let out = dir.join("cv");
    run(&[
        "crossval",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "5",
        "--folds",
        "2",
        "--set",
        "epochs=2",
        "--horizon",
        "5",
        "--tau",
        "1",
    ]);

    let mut fold_values: Vec<Vec<(String, f64)>> = Vec::new();
    for f in 1..=2 {
        let fold = out.join(format!("fold_{f}"));
        for file in ["checkpoint.txt", "training_log.csv", "predictions.csv", "metrics.csv"] {
            assert!(fold.join(file).exists(), "fold_{f} missing {file}");
        }
        let metrics = read(&fold.join("metrics.csv"));
        fold_values.push(
            metrics
                .lines()
                .skip(1)
                .filter(|l| !l.ends_with(','))
                .map(|l| {
                    let (key, value) = l.rsplit_once(',').unwrap();
                    (key.to_string(), value.parse::<f64>().unwrap())
                })
                .collect(),
        );
    }

    let summary = read(&out.join("summary.csv"));
    assert_eq!(summary.lines().next(), Some("cause,metric,mean,sd"));
    for line in summary.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 4, "row {line}");
        let key = format!("{},{}", fields[0], fields[1]);
        let folds: Vec<f64> = fold_values
            .iter()
            .flat_map(|rows| rows.iter().filter(|(k, _)| *k == key).map(|(_, v)| *v))
            .collect();
        if folds.len() == 2 {
            let mean: f64 = fields[2].parse().unwrap();
            assert!(
                (mean - (folds[0] + folds[1]) / 2.0).abs() < 1e-12,
                "summary mean for {key} is not the fold average: {line}"
            );
            assert!(!fields[3].is_empty(), "sd should be defined for {key}");
        }
    }
}

#[test]
fn crossval_rejects_a_single_fold() {
    let dir = scratch("crossval_folds");
    let data = synth_small(&dir, 6, 40, 8);
    let stderr = run_fail(&[
        "crossval",
        "--data",
        data.to_str().unwrap(),
        "--out",
        dir.join("cv").to_str().unwrap(),
        "--folds",
        "1",
    ]);
    assert!(stderr.contains("at least 2 folds"), "stderr: {stderr}");
}
