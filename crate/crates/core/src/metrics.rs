//! Censoring-aware evaluation: Kaplan-Meier censoring estimator, cause-specific
//! Brier score and its time integral under inverse-probability-of-censoring
//! weights, time-dependent cause-specific concordance, and weighted
//! calibration curves.

use std::path::Path;

use crate::error::{CoreError, Result};
use crate::hazardheads::HazardGrid;

/// Kaplan-Meier product-limit estimate of the censoring distribution
/// G(t) = P(remaining uncensored past t) on the discrete time grid.
///
/// Censoring is the "event" here; true events leave the risk set. At a tied
/// time, events are taken to occur before censorings, so subjects whose event
/// falls on an interval are excluded from the censoring risk set of that same
/// interval.
#[derive(Debug, Clone)]
pub struct CensoringEstimate {
    /// g[t] = G(t) for t = 0..=max observed time; G(0) = 1.
    g: Vec<f64>,
}

impl CensoringEstimate {
    /// G(t), extended as a constant beyond the last observed time.
    pub fn at(&self, t: usize) -> f64 {
        self.g[t.min(self.g.len() - 1)]
    }

    /// Left limit G(t⁻): the probability of remaining uncensored up to, but
    /// not including, t. Used to weight subjects whose event occurred at t
    /// without conditioning on their own censoring interval.
    pub fn left_limit(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.at(t - 1)
        }
    }
}

fn check_outcomes(outcomes: &[(usize, usize)]) -> Result<()> {
    if outcomes.is_empty() {
        return Err(CoreError::Validation("no outcomes supplied".into()));
    }
    for (i, &(t, _)) in outcomes.iter().enumerate() {
        if t == 0 {
            return Err(CoreError::Validation(format!(
                "outcome {i} has time 0; intervals are numbered from 1"
            )));
        }
    }
    Ok(())
}

/// Estimate the censoring distribution from `(time, cause)` outcomes, where
/// cause 0 marks censoring and any other value a true event.
pub fn km_censoring(outcomes: &[(usize, usize)]) -> Result<CensoringEstimate> {
    check_outcomes(outcomes)?;
    let max_t = outcomes.iter().map(|&(t, _)| t).max().unwrap();
    let mut censored = vec![0usize; max_t + 1];
    let mut events = vec![0usize; max_t + 1];
    for &(t, e) in outcomes {
        if e == 0 {
            censored[t] += 1;
        } else {
            events[t] += 1;
        }
    }

    let mut at_risk = outcomes.len();
    let mut g = vec![1.0; max_t + 1];
    let mut running = 1.0;
    for t in 1..=max_t {
        if censored[t] > 0 {
            // Events at t are resolved first and do not witness the
            // censorings of their own interval.
            let risk = at_risk - events[t];
            running *= 1.0 - censored[t] as f64 / risk as f64;
        }
        g[t] = running;
        at_risk -= censored[t] + events[t];
    }
    Ok(CensoringEstimate { g })
}

/// Inverse-probability weight of one subject when scoring incidence by time
/// `j`. `None` marks a subject that must be dropped because the censoring
/// estimate vanishes at its evaluation point.
fn ipcw_weight(t: usize, e: usize, j: usize, g: &CensoringEstimate) -> Option<f64> {
    if t > j {
        let gj = g.at(j);
        if gj == 0.0 {
            return None;
        }
        Some(1.0 / gj)
    } else if e != 0 {
        let gt = g.left_limit(t);
        if gt == 0.0 {
            return None;
        }
        Some(1.0 / gt)
    } else {
        // Censored on or before j: the subject carries no information about
        // incidence by j.
        Some(0.0)
    }
}

/// A weighted score that can be undefined when no weight mass remains, along
/// with the number of subjects dropped because their censoring weight was
/// unavailable (G = 0 at the evaluation point).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedScore {
    pub value: Option<f64>,
    pub dropped: usize,
}

/// Cause-specific Brier score at time `j`:
/// mean over subjects of W_i(j) · (I(T_i ≤ j, e_i = k) − F̂)², where F̂ is the
/// predicted cumulative incidence of cause `k` by `j`. Subjects censored
/// before `j` get weight zero; past events are weighted by 1/G(T⁻) and
/// still-at-risk subjects by 1/G(j).
pub fn brier_k(
    preds: &[f64],
    outcomes: &[(usize, usize)],
    g: &CensoringEstimate,
    j: usize,
    k: usize,
) -> Result<WeightedScore> {
    check_outcomes(outcomes)?;
    if preds.len() != outcomes.len() {
        return Err(CoreError::shape(
            "brier",
            format!("{} predictions vs {} outcomes", preds.len(), outcomes.len()),
        ));
    }
    if j == 0 || k == 0 {
        return Err(CoreError::Validation(
            "brier needs interval j >= 1 and cause k >= 1".into(),
        ));
    }
    if preds.iter().any(|p| !p.is_finite()) {
        return Err(CoreError::NonFinite("brier predictions"));
    }

    let mut total = 0.0;
    let mut mass = 0.0;
    let mut kept = 0usize;
    let mut dropped = 0usize;
    for (i, &(t, e)) in outcomes.iter().enumerate() {
        let Some(w) = ipcw_weight(t, e, j, g) else {
            dropped += 1;
            continue;
        };
        kept += 1;
        mass += w;
        let label = if t <= j && e == k { 1.0 } else { 0.0 };
        total += w * (label - preds[i]) * (label - preds[i]);
    }
    let value = if mass > 0.0 {
        Some(total / kept as f64)
    } else {
        None
    };
    Ok(WeightedScore { value, dropped })
}

/// Integrated Brier score for cause `k`: the uniform mean of `brier_k` over
/// the grid points, taken over the points where the score is defined.
/// `cif` holds one row per subject with the predicted cumulative incidence of
/// cause `k` at intervals 1..=H; grid entries index into those intervals.
pub fn ibs_k(
    cif: &[Vec<f64>],
    outcomes: &[(usize, usize)],
    g: &CensoringEstimate,
    grid: &[usize],
    k: usize,
) -> Result<WeightedScore> {
    if grid.is_empty() {
        return Err(CoreError::Validation("empty evaluation grid".into()));
    }
    if cif.len() != outcomes.len() {
        return Err(CoreError::shape(
            "ibs",
            format!("{} prediction rows vs {} outcomes", cif.len(), outcomes.len()),
        ));
    }
    let mut sum = 0.0;
    let mut defined = 0usize;
    let mut dropped = 0usize;
    for &j in grid {
        let preds: Vec<f64> = cif
            .iter()
            .enumerate()
            .map(|(i, row)| {
                row.get(j - 1).copied().ok_or_else(|| {
                    CoreError::Validation(format!(
                        "grid point {j} outside the prediction horizon for subject {i}"
                    ))
                })
            })
            .collect::<Result<_>>()?;
        let bs = brier_k(&preds, outcomes, g, j, k)?;
        dropped += bs.dropped;
        if let Some(v) = bs.value {
            sum += v;
            defined += 1;
        }
    }
    let value = if defined > 0 {
        Some(sum / defined as f64)
    } else {
        None
    };
    Ok(WeightedScore { value, dropped })
}

/// Which time the comparator's risk is read at when scoring a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CtdConvention {
    /// Both subjects are ranked by their predicted incidence at the earlier
    /// subject's event interval (the default).
    EarlierTime,
    /// Each subject is ranked at its own time: the case at its event interval,
    /// the comparator at its observed interval. Comparators whose interval
    /// falls beyond the prediction horizon are excluded.
    PairTimes,
}

/// Time-dependent concordance for cause `k` over pairs (a, b) where subject a
/// has an event of cause `k` at interval T_a within the horizon and subject b
/// is known event-free at T_a (a later observed interval, or censored exactly
/// at T_a). Concordant when a is predicted a higher incidence; prediction ties
/// count one half. Returns `None` when no comparable pair exists.
pub fn ctd_k(
    cif: &[Vec<f64>],
    outcomes: &[(usize, usize)],
    k: usize,
    convention: CtdConvention,
) -> Result<Option<f64>> {
    check_outcomes(outcomes)?;
    if cif.len() != outcomes.len() {
        return Err(CoreError::shape(
            "ctd",
            format!("{} prediction rows vs {} outcomes", cif.len(), outcomes.len()),
        ));
    }
    if k == 0 {
        return Err(CoreError::Validation("cause index must be >= 1".into()));
    }
    let horizon = cif[0].len();
    if horizon == 0 || cif.iter().any(|row| row.len() != horizon) {
        return Err(CoreError::shape(
            "ctd",
            "prediction rows must share one nonempty horizon",
        ));
    }

    let mut concordant = 0.0;
    let mut pairs = 0usize;
    for (a, &(ta, ea)) in outcomes.iter().enumerate() {
        if ea != k || ta > horizon {
            continue;
        }
        let risk_a = cif[a][ta - 1];
        for (b, &(tb, eb)) in outcomes.iter().enumerate() {
            if b == a {
                continue;
            }
            let comparable = tb > ta || (tb == ta && eb == 0);
            if !comparable {
                continue;
            }
            let risk_b = match convention {
                CtdConvention::EarlierTime => cif[b][ta - 1],
                CtdConvention::PairTimes => {
                    if tb > horizon {
                        continue;
                    }
                    cif[b][tb - 1]
                }
            };
            pairs += 1;
            if risk_a > risk_b {
                concordant += 1.0;
            } else if risk_a == risk_b {
                concordant += 0.5;
            }
        }
    }
    if pairs == 0 {
        return Ok(None);
    }
    Ok(Some(concordant / pairs as f64))
}

/// One calibration bin: the mean predicted incidence of its members against
/// the censoring-weighted observed rate. `obs_rate` and `se` are `None` when
/// the bin holds no weight mass.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationBin {
    pub mean_pred: f64,
    pub obs_rate: Option<f64>,
    pub se: Option<f64>,
    /// Total inverse-probability weight in the bin; bins sum to the cohort's
    /// weight mass.
    pub n_eff: f64,
}

/// Per-cause calibration table at a fixed evaluation interval.
#[derive(Debug, Clone)]
pub struct CalibrationTable {
    pub interval: usize,
    pub cause: usize,
    pub bins: Vec<CalibrationBin>,
    /// Subjects excluded because the censoring estimate vanished at their
    /// evaluation point.
    pub dropped: usize,
}

/// Group predictions into equal-frequency bins and compare each bin's mean
/// predicted incidence of cause `k` by interval `j` with the
/// censoring-weighted observed rate. Adjacent bins whose boundary predictions
/// tie are merged, so identical predictions collapse into one bin. The
/// standard error uses the weighted binomial approximation
/// sqrt(p(1−p)/n_eff).
pub fn calibration_curve(
    preds: &[f64],
    outcomes: &[(usize, usize)],
    g: &CensoringEstimate,
    j: usize,
    k: usize,
    bins: usize,
) -> Result<CalibrationTable> {
    check_outcomes(outcomes)?;
    if preds.len() != outcomes.len() {
        return Err(CoreError::shape(
            "calibration",
            format!("{} predictions vs {} outcomes", preds.len(), outcomes.len()),
        ));
    }
    if bins < 2 {
        return Err(CoreError::Validation("calibration needs >= 2 bins".into()));
    }
    if j == 0 || k == 0 {
        return Err(CoreError::Validation(
            "calibration needs interval j >= 1 and cause k >= 1".into(),
        ));
    }
    if preds.iter().any(|p| !p.is_finite()) {
        return Err(CoreError::NonFinite("calibration predictions"));
    }

    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[a].total_cmp(&preds[b]));

    // Equal-frequency cut points; a cut that lands inside a run of equal
    // predictions slides to the end of the run so tied values stay in one bin
    // (all-identical predictions therefore collapse to a single bin).
    let n = order.len();
    let mut starts: Vec<usize> = Vec::with_capacity(bins);
    for b in 0..bins {
        let mut start = b * n / bins;
        while start > 0 && start < n && preds[order[start - 1]] == preds[order[start]] {
            start += 1;
        }
        if start >= n || starts.last().is_some_and(|&prev| prev >= start) {
            continue;
        }
        starts.push(start);
    }

    let mut table = Vec::with_capacity(starts.len());
    let mut dropped = 0usize;
    for (rank, &start) in starts.iter().enumerate() {
        let end = starts.get(rank + 1).copied().unwrap_or(n);
        let members = &order[start..end];
        let mean_pred = members.iter().map(|&i| preds[i]).sum::<f64>() / members.len() as f64;
        let mut mass = 0.0;
        let mut hits = 0.0;
        for &i in members {
            let (t, e) = outcomes[i];
            let Some(w) = ipcw_weight(t, e, j, g) else {
                dropped += 1;
                continue;
            };
            mass += w;
            if t <= j && e == k {
                hits += w;
            }
        }
        let (obs_rate, se) = if mass > 0.0 {
            let p = hits / mass;
            (Some(p), Some((p * (1.0 - p) / mass).sqrt()))
        } else {
            (None, None)
        };
        table.push(CalibrationBin {
            mean_pred,
            obs_rate,
            se,
            n_eff: mass,
        });
    }
    Ok(CalibrationTable {
        interval: j,
        cause: k,
        bins: table,
        dropped,
    })
}

/// Evaluation settings: calibration bin count and the concordance time
/// convention.
#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub bins: usize,
    pub ctd_convention: CtdConvention,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            bins: 10,
            ctd_convention: CtdConvention::EarlierTime,
        }
    }
}

/// Per-cause evaluation results.
#[derive(Debug, Clone)]
pub struct CauseReport {
    pub cause: usize,
    pub ibs: Option<f64>,
    pub ctd: Option<f64>,
    pub dropped: usize,
    pub calibration: CalibrationTable,
}

/// Full evaluation of a prediction set against observed outcomes.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub horizon: usize,
    pub causes: Vec<CauseReport>,
}

/// Score every cause of a prediction set: integrated Brier score over the
/// full horizon grid, time-dependent concordance, and a calibration table at
/// the final interval. Outcome times count intervals from the same origin as
/// the predictions; the censoring distribution is estimated from these
/// outcomes.
pub fn evaluate(
    grids: &[HazardGrid],
    outcomes: &[(usize, usize)],
    config: &EvalConfig,
) -> Result<EvalReport> {
    check_outcomes(outcomes)?;
    if grids.len() != outcomes.len() {
        return Err(CoreError::shape(
            "evaluate",
            format!("{} grids vs {} outcomes", grids.len(), outcomes.len()),
        ));
    }
    let horizon = grids[0].h();
    let k = grids[0].k();
    if grids.iter().any(|gr| gr.h() != horizon || gr.k() != k) {
        return Err(CoreError::shape(
            "evaluate",
            "prediction grids disagree on horizon or cause count",
        ));
    }
    for &(t, e) in outcomes {
        if e > k {
            return Err(CoreError::Validation(format!(
                "outcome cause {e} exceeds the {k} predicted causes (time {t})"
            )));
        }
    }

    let g = km_censoring(outcomes)?;
    let grid: Vec<usize> = (1..=horizon).collect();
    let mut causes = Vec::with_capacity(k);
    for cause in 1..=k {
        let cif: Vec<Vec<f64>> = grids
            .iter()
            .map(|gr| (0..horizon).map(|j| gr.cif.data[j * k + (cause - 1)]).collect())
            .collect();
        let ibs = ibs_k(&cif, outcomes, &g, &grid, cause)?;
        let ctd = ctd_k(&cif, outcomes, cause, config.ctd_convention)?;
        let final_preds: Vec<f64> = cif.iter().map(|row| row[horizon - 1]).collect();
        let calibration =
            calibration_curve(&final_preds, outcomes, &g, horizon, cause, config.bins)?;
        if ibs.dropped > 0 {
            log::warn!(
                "cause {cause}: {} subjects dropped from the Brier integral (G = 0)",
                ibs.dropped
            );
        }
        causes.push(CauseReport {
            cause,
            ibs: ibs.value,
            ctd,
            dropped: ibs.dropped,
            calibration,
        });
    }
    Ok(EvalReport { horizon, causes })
}

/// Write the per-cause scalar metrics as CSV: `cause,metric,value`. Undefined
/// scores leave the value field empty.
pub fn write_metrics_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut text = String::from("cause,metric,value\n");
    for c in &report.causes {
        text.push_str(&format!("{},ibs,{}\n", c.cause, fmt(c.ibs)));
        text.push_str(&format!("{},ctd,{}\n", c.cause, fmt(c.ctd)));
    }
    std::fs::write(path, text).map_err(|e| CoreError::io(path.display().to_string(), e))
}

/// Write one cause's calibration table as CSV:
/// `bin,mean_pred,obs_rate,se,n_eff`. Bins without weight mass leave the
/// observed rate and standard error empty.
pub fn write_calibration_csv(path: &Path, table: &CalibrationTable) -> Result<()> {
    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut text = String::from("bin,mean_pred,obs_rate,se,n_eff\n");
    for (i, bin) in table.bins.iter().enumerate() {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            i + 1,
            bin.mean_pred,
            fmt(bin.obs_rate),
            fmt(bin.se),
            bin.n_eff
        ));
    }
    std::fs::write(path, text).map_err(|e| CoreError::io(path.display().to_string(), e))
}
