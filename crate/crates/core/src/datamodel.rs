//! Cohort representation: feature schema, interval discretization of
//! irregular observations, missingness masks and staleness counters,
//! landmark sampling, and batch padding.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::Array;
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum FeatureKind {
    Numeric,
    Categorical { cardinality: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSpec {
    pub name: String,
    pub kind: FeatureKind,
    /// Standardization statistics for numeric features, fit on training
    /// subjects only; identity (0, 1) until fit. Unused for categoricals.
    pub mean: f64,
    pub std: f64,
}

impl FeatureSpec {
    pub fn numeric(name: impl Into<String>) -> Self {
        FeatureSpec {
            name: name.into(),
            kind: FeatureKind::Numeric,
            mean: 0.0,
            std: 1.0,
        }
    }

    pub fn categorical(name: impl Into<String>, cardinality: usize) -> Self {
        FeatureSpec {
            name: name.into(),
            kind: FeatureKind::Categorical { cardinality },
            mean: 0.0,
            std: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSchema {
    pub features: Vec<FeatureSpec>,
}

impl FeatureSchema {
    pub fn new(features: Vec<FeatureSpec>) -> Result<Self> {
        if features.is_empty() {
            return Err(CoreError::Validation("schema has no features".into()));
        }
        for (i, f) in features.iter().enumerate() {
            if features[..i].iter().any(|g| g.name == f.name) {
                return Err(CoreError::Validation(format!(
                    "duplicate feature name '{}'",
                    f.name
                )));
            }
            if let FeatureKind::Categorical { cardinality } = f.kind {
                if cardinality < 2 {
                    return Err(CoreError::Validation(format!(
                        "categorical feature '{}' needs cardinality >= 2, got {cardinality}",
                        f.name
                    )));
                }
            }
            if f.std <= 0.0 {
                return Err(CoreError::Validation(format!(
                    "feature '{}' has non-positive std {}",
                    f.name, f.std
                )));
            }
        }
        Ok(FeatureSchema { features })
    }

    pub fn d(&self) -> usize {
        self.features.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.features.iter().position(|f| f.name == name)
    }

    /// Parse a schema file: one feature per line, `name,kind[,cardinality]`,
    /// no header. Blank lines and `#` comments are skipped.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::io(path.display().to_string(), e))?;
        let mut features = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parts: Vec<&str> = line.split(',').map(str::trim).collect();
            let bad = |msg: &str| CoreError::Csv {
                path: path.display().to_string(),
                line: lineno + 1,
                msg: msg.to_string(),
            };
            match parts.as_slice() {
                [name, "numeric"] => features.push(FeatureSpec::numeric(*name)),
                [name, "categorical", card] => {
                    let cardinality: usize = card
                        .parse()
                        .map_err(|_| bad(&format!("bad cardinality '{card}'")))?;
                    features.push(FeatureSpec::categorical(*name, cardinality));
                }
                [_, "categorical"] => return Err(bad("categorical feature needs a cardinality")),
                _ => return Err(bad("expected `name,kind[,cardinality]`")),
            }
        }
        FeatureSchema::new(features)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for f in &self.features {
            match f.kind {
                FeatureKind::Numeric => writeln!(out, "{},numeric", f.name).unwrap(),
                FeatureKind::Categorical { cardinality } => {
                    writeln!(out, "{},categorical,{cardinality}", f.name).unwrap()
                }
            }
        }
        std::fs::write(path, out).map_err(|e| CoreError::io(path.display().to_string(), e))
    }

    /// Fit numeric standardization statistics from the raw observed cells of
    /// the given subjects (training split only, to avoid leakage). Constant
    /// features fall back to std 1 so standardization is always defined.
    pub fn fit_standardization(&mut self, cohort: &Cohort, subject_idx: &[usize]) {
        for (d, spec) in self.features.iter_mut().enumerate() {
            if spec.kind != FeatureKind::Numeric {
                continue;
            }
            let mut n = 0usize;
            let mut mean = 0.0;
            let mut m2 = 0.0;
            for &i in subject_idx {
                for (_, &v) in &cohort.subjects[i].obs[d] {
                    n += 1;
                    let delta = v - mean;
                    mean += delta / n as f64;
                    m2 += delta * (v - mean);
                }
            }
            if n == 0 {
                spec.mean = 0.0;
                spec.std = 1.0;
            } else {
                spec.mean = mean;
                let var = m2 / n as f64;
                spec.std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawObservation {
    pub subject_id: String,
    pub time: f64,
    pub feature: String,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscretizationGrid {
    /// Interval width in the dataset's continuous time units.
    pub width: f64,
    /// Number of intervals J; interval j covers [(j-1)*width, j*width).
    pub intervals: usize,
}

impl DiscretizationGrid {
    pub fn new(width: f64, intervals: usize) -> Result<Self> {
        if !(width > 0.0) {
            return Err(CoreError::Validation(format!(
                "grid width must be > 0, got {width}"
            )));
        }
        if intervals == 0 {
            return Err(CoreError::Validation("grid needs at least 1 interval".into()));
        }
        Ok(DiscretizationGrid { width, intervals })
    }

    /// Map a continuous time to its 1-based interval index.
    pub fn interval_of(&self, time: f64) -> Result<usize> {
        if !(time >= 0.0) {
            return Err(CoreError::Validation(format!("negative time {time}")));
        }
        let j = (time / self.width).floor() as usize + 1;
        if j > self.intervals {
            return Err(CoreError::Validation(format!(
                "time {time} falls beyond the grid ({} intervals of width {})",
                self.intervals, self.width
            )));
        }
        Ok(j)
    }

    /// Midpoint of interval j in continuous units (used when emitting CSVs).
    pub fn midpoint(&self, j: usize) -> f64 {
        (j as f64 - 0.5) * self.width
    }
}

/// One subject's raw (unstandardized) observations on the interval grid,
/// one sparse interval->value map per feature, plus the discrete outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRecord {
    pub id: String,
    pub obs: Vec<BTreeMap<usize, f64>>,
    /// Discrete event/censoring interval T (1-based).
    pub event_interval: usize,
    /// Cause in {0..K}, 0 = censored.
    pub event_cause: usize,
    pub last_observed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub schema: FeatureSchema,
    pub grid: DiscretizationGrid,
    pub subjects: Vec<SubjectRecord>,
}

impl Cohort {
    pub fn n_causes(&self) -> usize {
        self.subjects.iter().map(|s| s.event_cause).max().unwrap_or(0)
    }
}

/// Assign observations to grid intervals, resolving multiple observations of
/// one feature within an interval to the latest by time (ties: input order).
/// Returns per-subject sparse maps in first-appearance order of subject ids.
pub fn discretize(
    observations: &[RawObservation],
    schema: &FeatureSchema,
    grid: &DiscretizationGrid,
) -> Result<Vec<(String, Vec<BTreeMap<usize, f64>>, usize)>> {
    let mut order: Vec<String> = Vec::new();
    let mut cells: BTreeMap<String, Vec<BTreeMap<usize, (f64, f64)>>> = BTreeMap::new();
    for o in observations {
        let d = schema.index_of(&o.feature).ok_or_else(|| {
            CoreError::Validation(format!(
                "unknown feature '{}' for subject {}",
                o.feature, o.subject_id
            ))
        })?;
        let j = grid.interval_of(o.time).map_err(|e| {
            CoreError::Validation(format!("subject {}: {e}", o.subject_id))
        })?;
        if let FeatureKind::Categorical { cardinality } = schema.features[d].kind {
            let c = o.value;
            if c.fract() != 0.0 || c < 0.0 || c >= cardinality as f64 {
                return Err(CoreError::Validation(format!(
                    "subject {}: category value {c} outside 0..{cardinality} for '{}'",
                    o.subject_id, o.feature
                )));
            }
        }
        let per_feature = cells
            .entry(o.subject_id.clone())
            .or_insert_with(|| {
                order.push(o.subject_id.clone());
                vec![BTreeMap::new(); schema.d()]
            });
        match per_feature[d].get(&j) {
            // >= keeps the later-by-input-order observation on exact time ties
            Some(&(t_prev, _)) if o.time < t_prev => {}
            _ => {
                per_feature[d].insert(j, (o.time, o.value));
            }
        }
    }
    let mut out = Vec::with_capacity(order.len());
    for id in order {
        let per_feature = cells.remove(&id).unwrap();
        let mut maps = Vec::with_capacity(per_feature.len());
        let mut last = 0usize;
        for m in per_feature {
            let mut plain = BTreeMap::new();
            for (j, (_, v)) in m {
                last = last.max(j);
                plain.insert(j, v);
            }
            maps.push(plain);
        }
        out.push((id, maps, last));
    }
    Ok(out)
}

/// Dense per-subject model inputs over intervals 1..=len.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    /// (len, D) standardized values / category indices, LOCF-filled.
    pub x: Array,
    /// (len, D) missingness mask: 1 = no same-interval observation.
    pub m: Array,
    /// (len, D) intervals since the last actual observation (0 when observed;
    /// j-1 before a feature's first observation).
    pub delta: Array,
}

/// Build the dense trajectory for intervals 1..=len: last observation carried
/// forward, mask 1 at imputed cells, staleness counted per feature. Features
/// with no observation yet hold the neutral fill (0 standardized / category 0)
/// with staleness counted from the sequence start.
pub fn build_trajectory(record: &SubjectRecord, schema: &FeatureSchema, len: usize) -> Result<Trajectory> {
    if len == 0 {
        return Err(CoreError::Validation("trajectory length must be >= 1".into()));
    }
    let d = schema.d();
    if record.obs.len() != d {
        return Err(CoreError::Validation(format!(
            "subject {}: {} feature maps for a {d}-feature schema",
            record.id,
            record.obs.len()
        )));
    }
    let mut x = Array::zeros(&[len, d]);
    let mut m = Array::zeros(&[len, d]);
    let mut delta = Array::zeros(&[len, d]);
    for (f, spec) in schema.features.iter().enumerate() {
        let mut carried: Option<f64> = None;
        let mut last_obs: Option<usize> = None;
        for j in 1..=len {
            let cell = j.saturating_sub(1) * d + f;
            if let Some(&v) = record.obs[f].get(&j) {
                let std_v = match spec.kind {
                    FeatureKind::Numeric => (v - spec.mean) / spec.std,
                    FeatureKind::Categorical { .. } => v,
                };
                carried = Some(std_v);
                last_obs = Some(j);
                x.data[cell] = std_v;
                // m, delta stay 0: observed
            } else {
                m.data[cell] = 1.0;
                x.data[cell] = carried.unwrap_or(0.0);
                delta.data[cell] = match last_obs {
                    Some(o) => (j - o) as f64,
                    None => (j - 1) as f64,
                };
            }
        }
    }
    Ok(Trajectory { x, m, delta })
}

/// One subject prepared for the model: history truncated at the landmark,
/// event labels and loss mask over the prediction horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkedSubject {
    pub traj: Trajectory,
    pub tau: usize,
    /// (H, K) one-hot event labels within the horizon.
    pub y: Array,
    /// Horizon steps inside (tau, min(T, tau+H)] contribute to the loss.
    pub loss_mask: Vec<bool>,
}

fn label_window(record: &SubjectRecord, tau: usize, horizon: usize, k: usize) -> (Array, Vec<bool>) {
    let mut y = Array::zeros(&[horizon, k]);
    let mut mask = vec![false; horizon];
    let t = record.event_interval;
    for h in 0..horizon {
        let j = tau + 1 + h;
        if j <= t.min(tau + horizon) {
            mask[h] = true;
        }
    }
    if record.event_cause != 0 && t > tau && t <= tau + horizon {
        y.data[(t - tau - 1) * k + (record.event_cause - 1)] = 1.0;
    }
    (y, mask)
}

/// Landmark a subject at a fixed interval tau. Returns `None` when the
/// subject is not at risk there (tau past the event or the observations).
pub fn landmark_at(
    record: &SubjectRecord,
    schema: &FeatureSchema,
    tau: usize,
    horizon: usize,
    k: usize,
) -> Result<Option<LandmarkedSubject>> {
    let hi = (record.event_interval.saturating_sub(1)).min(record.last_observed);
    if tau == 0 || tau > hi {
        return Ok(None);
    }
    let traj = build_trajectory(record, schema, tau)?;
    let (y, loss_mask) = label_window(record, tau, horizon, k);
    Ok(Some(LandmarkedSubject {
        traj,
        tau,
        y,
        loss_mask,
    }))
}

/// Draw a landmark uniformly over the subject's valid intervals
/// [1, min(T-1, last observed)]. Subjects with no valid landmark (events in
/// the first interval) yield `None`; callers count and report the skips.
pub fn sample_landmark(
    record: &SubjectRecord,
    schema: &FeatureSchema,
    horizon: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Option<LandmarkedSubject>> {
    let hi = (record.event_interval.saturating_sub(1)).min(record.last_observed);
    if hi == 0 {
        return Ok(None);
    }
    let tau = rng.gen_range(1..=hi);
    landmark_at(record, schema, tau, horizon, k)
}

/// A padded stack of landmarked subjects ready for one forward/backward pass.
#[derive(Debug, Clone)]
pub struct Batch {
    /// (B, S, D) values, right-padded past each subject's landmark.
    pub x: Array,
    pub m: Array,
    pub delta: Array,
    /// Row-major (B*S) step validity; padded steps are false.
    pub valid: Vec<bool>,
    pub seq_len: Vec<usize>,
    /// (B, H, K) event labels.
    pub y: Array,
    /// (B, H) loss mask as 0/1.
    pub loss_mask: Array,
}

impl Batch {
    pub fn b(&self) -> usize {
        self.x.shape[0]
    }

    pub fn s(&self) -> usize {
        self.x.shape[1]
    }

    pub fn d(&self) -> usize {
        self.x.shape[2]
    }

    pub fn horizon(&self) -> usize {
        self.y.shape[1]
    }

    pub fn k(&self) -> usize {
        self.y.shape[2]
    }
}

/// Right-pad a list of landmarked subjects to the longest history among them.
/// Padded cells carry M=1, Delta=0 and are flagged invalid so attention and
/// the loss never see them.
pub fn make_batch(items: &[LandmarkedSubject]) -> Result<Batch> {
    if items.is_empty() {
        return Err(CoreError::Validation("empty batch".into()));
    }
    let d = items[0].traj.x.shape[1];
    let horizon = items[0].y.shape[0];
    let k = items[0].y.shape[1];
    for it in items {
        if it.traj.x.shape[1] != d || it.y.shape != vec![horizon, k] {
            return Err(CoreError::Validation(
                "batch mixes subjects with different schemas or horizons".into(),
            ));
        }
        let events: f64 = it.y.data.iter().sum();
        if events > 1.0 {
            return Err(CoreError::Validation(
                "subject carries more than one event label".into(),
            ));
        }
    }
    let b = items.len();
    let s = items.iter().map(|it| it.tau).max().unwrap();
    let mut x = Array::zeros(&[b, s, d]);
    let mut m = Array::full(&[b, s, d], 1.0);
    let mut delta = Array::zeros(&[b, s, d]);
    let mut valid = vec![false; b * s];
    let mut y = Array::zeros(&[b, horizon, k]);
    let mut loss_mask = Array::zeros(&[b, horizon]);
    let mut seq_len = Vec::with_capacity(b);
    for (i, it) in items.iter().enumerate() {
        let tau = it.tau;
        seq_len.push(tau);
        for step in 0..tau {
            let src = step * d;
            let dst = (i * s + step) * d;
            x.data[dst..dst + d].copy_from_slice(&it.traj.x.data[src..src + d]);
            m.data[dst..dst + d].copy_from_slice(&it.traj.m.data[src..src + d]);
            delta.data[dst..dst + d].copy_from_slice(&it.traj.delta.data[src..src + d]);
            valid[i * s + step] = true;
        }
        y.data[i * horizon * k..(i + 1) * horizon * k].copy_from_slice(&it.y.data);
        for h in 0..horizon {
            loss_mask.data[i * horizon + h] = if it.loss_mask[h] { 1.0 } else { 0.0 };
        }
    }
    Ok(Batch {
        x,
        m,
        delta,
        valid,
        seq_len,
        y,
        loss_mask,
    })
}

fn parse_field<T: std::str::FromStr>(
    raw: &str,
    what: &str,
    path: &Path,
    line: usize,
) -> Result<T> {
    raw.trim().parse().map_err(|_| CoreError::Csv {
        path: path.display().to_string(),
        line,
        msg: format!("bad {what} '{raw}'"),
    })
}

/// Read a long-format observations CSV (`subject_id,time,feature,value`) and
/// an outcomes CSV (`subject_id,event_time,event_cause`, cause 0 = censored)
/// into a cohort on the given grid. Values stay raw; standardization happens
/// when trajectories are built, using whatever statistics the schema holds.
pub fn ingest_csv(
    observations_path: &Path,
    outcomes_path: &Path,
    schema: &FeatureSchema,
    grid: &DiscretizationGrid,
) -> Result<Cohort> {
    let rows = read_observation_rows(observations_path)?;
    if rows.is_empty() {
        return Err(CoreError::Validation(format!(
            "no observations in {}",
            observations_path.display()
        )));
    }
    // validate against the schema and grid here, where line numbers exist
    for (line, o) in &rows {
        let located = |msg: String| CoreError::Csv {
            path: observations_path.display().to_string(),
            line: *line,
            msg,
        };
        let d = schema
            .index_of(&o.feature)
            .ok_or_else(|| located(format!("unknown feature '{}'", o.feature)))?;
        grid.interval_of(o.time)
            .map_err(|e| located(format!("{e}")))?;
        if let FeatureKind::Categorical { cardinality } = schema.features[d].kind {
            if o.value.fract() != 0.0 || o.value < 0.0 || o.value >= cardinality as f64 {
                return Err(located(format!(
                    "category value {} outside 0..{cardinality} for '{}'",
                    o.value, o.feature
                )));
            }
        }
    }
    let observations: Vec<RawObservation> = rows.into_iter().map(|(_, o)| o).collect();
    let sparse = discretize(&observations, schema, grid)?;
    let mut outcomes = read_outcomes(outcomes_path, grid)?;

    let mut subjects = Vec::with_capacity(sparse.len());
    for (id, obs, last_observed) in sparse {
        let (event_interval, event_cause) = outcomes.remove(&id).ok_or_else(|| {
            CoreError::Validation(format!("subject {id} has observations but no outcome row"))
        })?;
        subjects.push(SubjectRecord {
            id,
            obs,
            event_interval,
            event_cause,
            last_observed,
        });
    }
    if !outcomes.is_empty() {
        let orphan = outcomes.keys().next().unwrap();
        return Err(CoreError::Validation(format!(
            "subject {orphan} has an outcome row but no observations"
        )));
    }
    Ok(Cohort {
        schema: schema.clone(),
        grid: *grid,
        subjects,
    })
}

/// Parse an outcomes CSV (`subject_id,event_time,event_cause`) into
/// per-subject discrete event intervals.
pub fn read_outcomes(path: &Path, grid: &DiscretizationGrid) -> Result<BTreeMap<String, (usize, usize)>> {
    let mut outcomes: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    let text = std::fs::read_to_string(path)
        .map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "subject_id,event_time,event_cause" => {}
        _ => {
            return Err(CoreError::Csv {
                path: path.display().to_string(),
                line: 1,
                msg: "expected header `subject_id,event_time,event_cause`".into(),
            })
        }
    }
    for (idx, raw) in lines {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = raw.split(',').collect();
        if parts.len() != 3 {
            return Err(CoreError::Csv {
                path: path.display().to_string(),
                line,
                msg: format!("expected 3 fields, got {}", parts.len()),
            });
        }
        let id = parts[0].trim().to_string();
        let event_time: f64 = parse_field(parts[1], "event_time", path, line)?;
        let cause: usize = parse_field(parts[2], "event_cause", path, line)?;
        let interval = grid.interval_of(event_time).map_err(|e| CoreError::Csv {
            path: path.display().to_string(),
            line,
            msg: format!("{e}"),
        })?;
        outcomes.insert(id, (interval, cause));
    }
    Ok(outcomes)
}

/// Parse a long-format observations CSV.
pub fn read_observations(path: &Path) -> Result<Vec<RawObservation>> {
    Ok(read_observation_rows(path)?
        .into_iter()
        .map(|(_, o)| o)
        .collect())
}

fn read_observation_rows(path: &Path) -> Result<Vec<(usize, RawObservation)>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim() == "subject_id,time,feature,value" => {}
        _ => {
            return Err(CoreError::Csv {
                path: path.display().to_string(),
                line: 1,
                msg: "expected header `subject_id,time,feature,value`".into(),
            })
        }
    }
    let mut out = Vec::new();
    for (idx, raw) in lines {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = raw.split(',').collect();
        if parts.len() != 4 {
            return Err(CoreError::Csv {
                path: path.display().to_string(),
                line,
                msg: format!("expected 4 fields, got {}", parts.len()),
            });
        }
        out.push((
            line,
            RawObservation {
                subject_id: parts[0].trim().to_string(),
                time: parse_field(parts[1], "time", path, line)?,
                feature: parts[2].trim().to_string(),
                value: parse_field(parts[3], "value", path, line)?,
            },
        ));
    }
    Ok(out)
}

/// Write a cohort back out as the two CSVs `ingest_csv` reads. Observation
/// times are placed at interval midpoints, so a round trip through
/// `ingest_csv` on the same grid reproduces the cohort exactly.
pub fn emit_csv(cohort: &Cohort, observations_path: &Path, outcomes_path: &Path) -> Result<()> {
    let mut obs = String::from("subject_id,time,feature,value\n");
    let mut outc = String::from("subject_id,event_time,event_cause\n");
    for s in &cohort.subjects {
        for (f, cells) in s.obs.iter().enumerate() {
            let name = &cohort.schema.features[f].name;
            for (&j, &v) in cells {
                writeln!(obs, "{},{},{},{}", s.id, cohort.grid.midpoint(j), name, v).unwrap();
            }
        }
        writeln!(
            outc,
            "{},{},{}",
            s.id,
            cohort.grid.midpoint(s.event_interval),
            s.event_cause
        )
        .unwrap();
    }
    let mut f = std::fs::File::create(observations_path)
        .map_err(|e| CoreError::io(observations_path.display().to_string(), e))?;
    f.write_all(obs.as_bytes())
        .map_err(|e| CoreError::io(observations_path.display().to_string(), e))?;
    let mut f = std::fs::File::create(outcomes_path)
        .map_err(|e| CoreError::io(outcomes_path.display().to_string(), e))?;
    f.write_all(outc.as_bytes())
        .map_err(|e| CoreError::io(outcomes_path.display().to_string(), e))?;
    Ok(())
}
