//! The five pipeline commands and their shared plumbing: dataset directories,
//! landmarked prediction, and metric reporting.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use survgrid_core::datamodel::{
    emit_csv, ingest_csv, landmark_at, make_batch, read_outcomes, Cohort, DiscretizationGrid,
    FeatureSchema, SubjectRecord,
};
use survgrid_core::diffcore::Tape;
use survgrid_core::encoder::{attention_records, write_attention_csv};
use survgrid_core::hazardheads::{read_predictions, write_predictions, HazardGrid};
use survgrid_core::metrics::{
    evaluate, write_calibration_csv, write_metrics_csv, CauseReport, EvalConfig, EvalReport,
};
use survgrid_core::model::Model;
use survgrid_core::synthgen::{generate, write_ground_truth_csv};
use survgrid_core::training::{train, write_training_log};

use crate::config::{eval_config, model_config, synth_config, train_config, Settings};

/// Generate a synthetic cohort and write the full dataset directory:
/// `observations.csv`, `outcomes.csv`, `schema.csv`, `truth.csv`, and the
/// `dataset.cfg` metadata the other commands read.
pub fn cmd_synth(settings: &Settings, out: &Path) -> Result<()> {
    let config = synth_config(settings)?;
    let seed = settings.u64_or("seed", 0)?;
    let (cohort, truth) = generate(&config, seed)?;

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    emit_csv(
        &cohort,
        &out.join("observations.csv"),
        &out.join("outcomes.csv"),
    )?;
    cohort.schema.save(&out.join("schema.csv"))?;
    write_ground_truth_csv(&out.join("truth.csv"), &cohort, &truth)?;
    fs::write(
        out.join("dataset.cfg"),
        format!(
            "intervals={}\ncauses={}\ngrid_width=1\n",
            config.n_intervals, config.n_causes
        ),
    )
    .with_context(|| format!("writing {}", out.join("dataset.cfg").display()))?;

    let mut events = vec![0usize; config.n_causes];
    let mut censored = 0usize;
    for s in &cohort.subjects {
        match s.event_cause {
            0 => censored += 1,
            c => events[c - 1] += 1,
        }
    }
    log::info!(
        "wrote {} subjects to {} (events per cause {:?}, {} censored)",
        cohort.subjects.len(),
        out.display(),
        events,
        censored
    );
    Ok(())
}

/// Dataset metadata from `dataset.cfg`: (intervals, causes, grid width).
fn load_meta(dir: &Path) -> Result<(usize, usize, f64)> {
    let cfg = Settings::load(Some(&dir.join("dataset.cfg")))
        .with_context(|| format!("reading dataset metadata in {}", dir.display()))?;
    let intervals = cfg.require_usize("intervals")?;
    let causes = cfg.require_usize("causes")?;
    if intervals == 0 || causes == 0 {
        bail!("dataset.cfg needs intervals >= 1 and causes >= 1");
    }
    Ok((intervals, causes, cfg.f64_or("grid_width", 1.0)?))
}

/// Load a dataset directory. The schema comes from `schema.csv` unless the
/// caller supplies one (a checkpoint's schema, carrying the standardization
/// statistics the model was trained with).
fn load_dataset(dir: &Path, schema: Option<FeatureSchema>) -> Result<(Cohort, usize, usize)> {
    let (intervals, causes, width) = load_meta(dir)?;
    let schema = match schema {
        Some(s) => s,
        None => FeatureSchema::load(&dir.join("schema.csv"))?,
    };
    let grid = DiscretizationGrid::new(width, intervals)?;
    let cohort = ingest_csv(
        &dir.join("observations.csv"),
        &dir.join("outcomes.csv"),
        &schema,
        &grid,
    )?;
    Ok((cohort, causes, intervals))
}

/// Train on a dataset directory and write `checkpoint.txt` plus
/// `training_log.csv`.
pub fn cmd_train(settings: &Settings, data: &Path, out: &Path) -> Result<()> {
    let (cohort, causes, _) = load_dataset(data, None)?;
    let mconfig = model_config(settings)?;
    let tconfig = train_config(settings)?;
    let outcome = train(&cohort, causes, mconfig, &tconfig)?;

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    outcome.model.save_checkpoint(&out.join("checkpoint.txt"))?;
    write_training_log(&out.join("training_log.csv"), &outcome.log)?;
    let best = &outcome.log[outcome.best_epoch];
    log::info!(
        "kept epoch {} (val loss {:.6}); checkpoint at {}",
        best.epoch,
        best.val_loss,
        out.join("checkpoint.txt").display()
    );
    Ok(())
}

/// Landmark every at-risk subject at `tau` and predict hazard grids in
/// batches. Returns the predictions and the number of subjects skipped
/// because they are not at risk there.
fn predict_at(
    model: &Model,
    subjects: &[SubjectRecord],
    tau: usize,
    batch_size: usize,
) -> Result<(Vec<(String, HazardGrid)>, usize)> {
    if tau == 0 {
        bail!("landmark tau must be >= 1: the history up to tau is the model input");
    }
    let mut ids = Vec::new();
    let mut items = Vec::new();
    let mut skipped = 0usize;
    for s in subjects {
        match landmark_at(s, &model.schema, tau, model.config.horizon, model.k)? {
            Some(item) => {
                ids.push(s.id.clone());
                items.push(item);
            }
            None => skipped += 1,
        }
    }
    if items.is_empty() {
        bail!("no subject is at risk at landmark {tau}");
    }
    let mut preds = Vec::with_capacity(items.len());
    for (chunk_ids, chunk) in ids.chunks(batch_size).zip(items.chunks(batch_size)) {
        let batch = make_batch(chunk)?;
        preds.extend(model.predict_grids(&batch, chunk_ids)?);
    }
    Ok((preds, skipped))
}

/// Predict from a checkpoint at a fixed landmark and write
/// `predictions.csv`; optionally dump batch-averaged attention maps.
pub fn cmd_predict(
    settings: &Settings,
    data: &Path,
    checkpoint: &Path,
    out: &Path,
    attention: bool,
) -> Result<()> {
    let model = Model::load_checkpoint(checkpoint)?;
    let (cohort, _, _) = load_dataset(data, Some(model.schema.clone()))?;
    let tau = settings.usize_or("tau", 1)?;
    let batch_size = settings.usize_or("batch_size", 64)?;

    let (preds, skipped) = predict_at(&model, &cohort.subjects, tau, batch_size)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_predictions(&out.join("predictions.csv"), &preds)?;
    if skipped > 0 {
        log::warn!("{skipped} subjects not at risk at landmark {tau} were skipped");
    }
    log::info!(
        "wrote {} prediction grids to {}",
        preds.len(),
        out.join("predictions.csv").display()
    );

    if attention {
        let mut items = Vec::new();
        for s in &cohort.subjects {
            if let Some(item) = landmark_at(s, &model.schema, tau, model.config.horizon, model.k)? {
                items.push(item);
                if items.len() == batch_size {
                    break;
                }
            }
        }
        let batch = make_batch(&items)?;
        let mut tape = Tape::new();
        let fw = model.forward(&mut tape, &batch)?;
        let records = attention_records(&tape, &fw.captures);
        write_attention_csv(&out.join("attention.csv"), &records)?;
        log::info!(
            "wrote attention maps averaged over {} subjects to {}",
            batch.b(),
            out.join("attention.csv").display()
        );
    }
    Ok(())
}

/// Pair predictions with outcomes relative to the landmark and score them.
/// Subjects whose event or censoring falls on or before `tau` carry no
/// post-landmark information and are skipped.
fn eval_against(
    preds: &[(String, HazardGrid)],
    outcomes: &BTreeMap<String, (usize, usize)>,
    tau: usize,
    config: &EvalConfig,
) -> Result<(EvalReport, usize)> {
    let mut grids = Vec::new();
    let mut rel = Vec::new();
    let mut skipped = 0usize;
    for (id, grid) in preds {
        let &(t, e) = outcomes
            .get(id)
            .with_context(|| format!("subject {id} has predictions but no outcome row"))?;
        if t <= tau {
            skipped += 1;
            continue;
        }
        grids.push(grid.clone());
        rel.push((t - tau, e));
    }
    if grids.is_empty() {
        bail!("no predicted subject has an outcome after landmark {tau}");
    }
    let report = evaluate(&grids, &rel, config)?;
    Ok((report, skipped))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "undefined".into())
}

fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    write_metrics_csv(&dir.join("metrics.csv"), report)?;
    for cause in &report.causes {
        write_calibration_csv(
            &dir.join(format!("calibration_{}.csv", cause.cause)),
            &cause.calibration,
        )?;
    }
    Ok(())
}

/// Score a prediction file against a dataset's outcomes and write
/// `metrics.csv` plus one calibration table per cause.
pub fn cmd_evaluate(
    settings: &Settings,
    predictions: &Path,
    data: &Path,
    out: &Path,
) -> Result<()> {
    let preds = read_predictions(predictions)?;
    let (intervals, _, width) = load_meta(data)?;
    let grid = DiscretizationGrid::new(width, intervals)?;
    let outcomes = read_outcomes(&data.join("outcomes.csv"), &grid)?;
    let tau = settings.usize_or("tau", 1)?;
    let config = eval_config(settings)?;

    let (report, skipped) = eval_against(&preds, &outcomes, tau, &config)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_report(out, &report)?;
    if skipped > 0 {
        log::warn!("{skipped} predicted subjects had outcomes on or before landmark {tau}");
    }
    for c in &report.causes {
        log::info!("cause {}: ibs={} ctd={}", c.cause, fmt_opt(c.ibs), fmt_opt(c.ctd));
    }
    Ok(())
}

/// K-fold cross-validation: per fold, train on the remainder, predict and
/// score the held-out fold, and write the artifacts under `fold_<i>/`; then
/// summarize fold metrics as mean and standard deviation.
pub fn cmd_crossval(settings: &Settings, data: &Path, out: &Path) -> Result<()> {
    let folds = settings.usize_or("folds", 5)?;
    if folds < 2 {
        bail!("cross-validation needs at least 2 folds, got {folds}");
    }
    let (cohort, causes, _) = load_dataset(data, None)?;
    let n = cohort.subjects.len();
    if n < folds {
        bail!("{n} subjects cannot fill {folds} folds");
    }
    let seed = settings.u64_or("seed", 0)?;
    let tau = settings.usize_or("tau", 1)?;
    let batch_size = settings.usize_or("batch_size", 64)?;
    let mconfig = model_config(settings)?;
    let tconfig = train_config(settings)?;
    let econfig = eval_config(settings)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut reports = Vec::with_capacity(folds);
    for f in 0..folds {
        let test_idx = &order[f * n / folds..(f + 1) * n / folds];
        let mut in_test = vec![false; n];
        for &i in test_idx {
            in_test[i] = true;
        }
        let train_cohort = Cohort {
            schema: cohort.schema.clone(),
            grid: cohort.grid,
            subjects: cohort
                .subjects
                .iter()
                .enumerate()
                .filter(|(i, _)| !in_test[*i])
                .map(|(_, s)| s.clone())
                .collect(),
        };
        let test_subjects: Vec<SubjectRecord> =
            test_idx.iter().map(|&i| cohort.subjects[i].clone()).collect();

        let fold_no = f + 1;
        let fold_dir = out.join(format!("fold_{fold_no}"));
        fs::create_dir_all(&fold_dir)
            .with_context(|| format!("creating {}", fold_dir.display()))?;

        let outcome = train(&train_cohort, causes, mconfig.clone(), &tconfig)
            .with_context(|| format!("training fold {fold_no}"))?;
        outcome.model.save_checkpoint(&fold_dir.join("checkpoint.txt"))?;
        write_training_log(&fold_dir.join("training_log.csv"), &outcome.log)?;

        let (preds, skipped) = predict_at(&outcome.model, &test_subjects, tau, batch_size)
            .with_context(|| format!("predicting fold {fold_no}"))?;
        write_predictions(&fold_dir.join("predictions.csv"), &preds)?;

        let outcome_map: BTreeMap<String, (usize, usize)> = test_subjects
            .iter()
            .map(|s| (s.id.clone(), (s.event_interval, s.event_cause)))
            .collect();
        let (report, eval_skipped) = eval_against(&preds, &outcome_map, tau, &econfig)
            .with_context(|| format!("scoring fold {fold_no}"))?;
        write_report(&fold_dir, &report)?;

        for c in &report.causes {
            log::info!(
                "fold {fold_no} cause {}: ibs={} ctd={}",
                c.cause,
                fmt_opt(c.ibs),
                fmt_opt(c.ctd)
            );
        }
        if skipped + eval_skipped > 0 {
            log::warn!(
                "fold {fold_no}: {} subjects skipped at landmark {tau}",
                skipped + eval_skipped
            );
        }
        reports.push(report);
    }

    write_crossval_summary(&out.join("summary.csv"), &reports)?;
    log::info!("wrote fold summary to {}", out.join("summary.csv").display());
    Ok(())
}

/// Mean and sample standard deviation of each (cause, metric) across folds,
/// ignoring folds where the metric is undefined. Cells stay empty when no
/// fold defines the value (mean) or fewer than two do (sd).
fn write_crossval_summary(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let picks: [(&str, fn(&CauseReport) -> Option<f64>); 2] =
        [("ibs", |c| c.ibs), ("ctd", |c| c.ctd)];
    let causes = reports[0].causes.len();
    let mut text = String::from("cause,metric,mean,sd\n");
    for cause in 0..causes {
        for (name, pick) in picks {
            let values: Vec<f64> = reports
                .iter()
                .filter_map(|r| pick(&r.causes[cause]))
                .collect();
            let mean = if values.is_empty() {
                String::new()
            } else {
                (values.iter().sum::<f64>() / values.len() as f64).to_string()
            };
            let sd = if values.len() < 2 {
                String::new()
            } else {
                let m = values.iter().sum::<f64>() / values.len() as f64;
                let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>()
                    / (values.len() - 1) as f64;
                var.sqrt().to_string()
            };
            text.push_str(&format!("{},{name},{mean},{sd}\n", cause + 1));
        }
    }
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
