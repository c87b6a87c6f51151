//! Synthetic longitudinal cohorts with analytically known discrete
//! cause-specific hazards, for oracle-based training and metric checks.
//!
//! Design: one binary "risk driver" feature per cause (categorical, optionally
//! flipping between intervals as a symmetric Markov chain), plus standard
//! normal noise features redrawn every interval. Hazards follow a
//! multiplicative link on the drivers' current states. Each interval runs a
//! single multinomial trial over {cause 1..K, censor, survive}, so censoring
//! is random and non-informative. Baseline observations (interval 1) are
//! always emitted; later observations are thinned by per-feature missingness.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::datamodel::{Cohort, DiscretizationGrid, FeatureSchema, FeatureSpec, SubjectRecord};
use crate::diffcore::Array;
use crate::error::{CoreError, Result};

/// Hard ceiling on the per-interval total event hazard after covariate
/// effects; the config validator keeps every configuration under it anyway.
pub const TOTAL_HAZARD_CAP: f64 = 0.95;

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub n_subjects: usize,
    /// D features: the first K are binary cause drivers, the rest numeric noise.
    pub n_features: usize,
    pub n_causes: usize,
    pub n_intervals: usize,
    /// Per-cause baseline hazard, each in (0,1).
    pub base_hazards: Vec<f64>,
    /// (D, K) multiplicative effects applied when a driver is active.
    /// Noise-feature rows must be 1 so the hazard bound holds for every
    /// covariate configuration.
    pub effect_multipliers: Vec<Vec<f64>>,
    /// Per-feature probability that a post-baseline observation is dropped.
    pub missing_rate: Vec<f64>,
    /// Per-interval censoring probability in the same trial as the causes.
    pub censor_hazard: f64,
    /// P(driver starts active), one per cause.
    pub driver_prevalence: Vec<f64>,
    /// Per-interval probability that a driver flips state (0 = static).
    pub driver_flip_prob: f64,
    pub seed: u64,
}

impl SynthConfig {
    /// A separable two-cause default: each cause has one driver that triples
    /// its baseline hazard.
    pub fn default_two_cause(n_subjects: usize, seed: u64) -> Self {
        SynthConfig {
            n_subjects,
            n_features: 4,
            n_causes: 2,
            n_intervals: 40,
            base_hazards: vec![0.13, 0.13],
            effect_multipliers: vec![
                vec![3.0, 1.0],
                vec![1.0, 3.0],
                vec![1.0, 1.0],
                vec![1.0, 1.0],
            ],
            missing_rate: vec![0.0; 4],
            censor_hazard: 0.13,
            driver_prevalence: vec![0.65, 0.65],
            driver_flip_prob: 0.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (d, k) = (self.n_features, self.n_causes);
        if self.n_subjects == 0 || k == 0 || self.n_intervals == 0 {
            return Err(CoreError::Validation(
                "synth config needs subjects, causes, and intervals >= 1".into(),
            ));
        }
        if d < k {
            return Err(CoreError::Validation(format!(
                "need at least one driver feature per cause: D={d} < K={k}"
            )));
        }
        if self.base_hazards.len() != k {
            return Err(CoreError::Validation(format!(
                "base_hazards has {} entries for K={k}",
                self.base_hazards.len()
            )));
        }
        if self.base_hazards.iter().any(|&b| !(0.0 < b && b < 1.0)) {
            return Err(CoreError::Validation(
                "base hazards must lie in (0,1)".into(),
            ));
        }
        if self.effect_multipliers.len() != d
            || self.effect_multipliers.iter().any(|row| row.len() != k)
        {
            return Err(CoreError::Validation(format!(
                "effect_multipliers must be {d}x{k}"
            )));
        }
        if self
            .effect_multipliers
            .iter()
            .flatten()
            .any(|&m| !(m > 0.0) || !m.is_finite())
        {
            return Err(CoreError::Validation(
                "effect multipliers must be positive and finite".into(),
            ));
        }
        for row in &self.effect_multipliers[k..] {
            if row.iter().any(|&m| m != 1.0) {
                return Err(CoreError::Validation(
                    "noise features cannot carry hazard effects (multiplier must be 1)".into(),
                ));
            }
        }
        if self.missing_rate.len() != d
            || self.missing_rate.iter().any(|&r| !(0.0..1.0).contains(&r))
        {
            return Err(CoreError::Validation(
                "missing_rate needs one entry per feature, each in [0,1)".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.censor_hazard) {
            return Err(CoreError::Validation(
                "censor hazard must lie in [0,1)".into(),
            ));
        }
        if self.driver_prevalence.len() != k
            || self
                .driver_prevalence
                .iter()
                .any(|&p| !(0.0 < p && p < 1.0))
        {
            return Err(CoreError::Validation(
                "driver_prevalence needs one entry per cause, each in (0,1)".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.driver_flip_prob) {
            return Err(CoreError::Validation(
                "driver_flip_prob must lie in [0,1)".into(),
            ));
        }
        // the bound must hold for the worst covariate configuration
        let mut worst = self.censor_hazard;
        for c in 0..k {
            let mut h = self.base_hazards[c];
            for dr in 0..k {
                h *= self.effect_multipliers[dr][c].max(1.0);
            }
            worst += h;
        }
        if worst >= 1.0 {
            return Err(CoreError::Validation(format!(
                "total hazard reaches {worst:.4} >= 1 for the worst covariate configuration"
            )));
        }
        Ok(())
    }

    pub fn schema(&self) -> FeatureSchema {
        let mut features = Vec::with_capacity(self.n_features);
        for c in 0..self.n_causes {
            features.push(FeatureSpec::categorical(format!("driver_{}", c + 1), 2));
        }
        for i in self.n_causes..self.n_features {
            features.push(FeatureSpec::numeric(format!(
                "noise_{}",
                i - self.n_causes + 1
            )));
        }
        FeatureSchema::new(features).expect("generated schema is valid")
    }

    pub fn grid(&self) -> DiscretizationGrid {
        DiscretizationGrid::new(1.0, self.n_intervals).expect("positive width")
    }

    /// Per-cause hazards under the multiplicative link for the given driver
    /// states, proportionally rescaled if the total would exceed the cap.
    pub fn hazards_for(&self, states: &[u8]) -> Vec<f64> {
        let k = self.n_causes;
        let mut h = self.base_hazards.clone();
        for c in 0..k {
            for dr in 0..k {
                if states[dr] == 1 {
                    h[c] *= self.effect_multipliers[dr][c];
                }
            }
        }
        let total: f64 = h.iter().sum();
        if total > TOTAL_HAZARD_CAP {
            let scale = TOTAL_HAZARD_CAP / total;
            for v in &mut h {
                *v *= scale;
            }
        }
        h
    }
}

/// Analytic per-subject counterparts of the model's hazard, survival, and
/// cumulative incidence quantities, on the full interval grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectTruth {
    /// (J, K) true cause-specific hazards.
    pub lambda: Array,
    /// S_j for j = 1..=J (event process only; censoring excluded).
    pub survival: Vec<f64>,
    /// (J, K) true cumulative incidence.
    pub cif: Array,
}

impl SubjectTruth {
    /// Build survival and CIF curves from a hazard grid by the product and
    /// accumulation identities they must satisfy.
    pub fn from_hazards(lambda: Array) -> Self {
        let j = lambda.shape[0];
        let k = lambda.shape[1];
        let mut survival = vec![0.0; j];
        let mut cif = Array::zeros(&[j, k]);
        let mut s_prev = 1.0;
        for row in 0..j {
            let total: f64 = lambda.data[row * k..(row + 1) * k].iter().sum();
            for c in 0..k {
                let prev = if row == 0 { 0.0 } else { cif.data[(row - 1) * k + c] };
                cif.data[row * k + c] = prev + lambda.data[row * k + c] * s_prev;
            }
            s_prev *= 1.0 - total;
            survival[row] = s_prev;
        }
        SubjectTruth {
            lambda,
            survival,
            cif,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Index-aligned with the cohort's subjects.
    pub subjects: Vec<SubjectTruth>,
}

/// Closed-form cumulative incidence grid for a static covariate vector
/// (drivers first, as in the generated schema).
pub fn true_cif(config: &SynthConfig, covariates: &[f64]) -> Result<Array> {
    config.validate()?;
    if covariates.len() != config.n_features {
        return Err(CoreError::Validation(format!(
            "expected {} covariates, got {}",
            config.n_features,
            covariates.len()
        )));
    }
    let mut states = vec![0u8; config.n_causes];
    for c in 0..config.n_causes {
        states[c] = match covariates[c] {
            v if v == 0.0 => 0,
            v if v == 1.0 => 1,
            v => {
                return Err(CoreError::Validation(format!(
                    "driver {} state must be 0 or 1, got {v}",
                    c + 1
                )))
            }
        };
    }
    let h = config.hazards_for(&states);
    let (j, k) = (config.n_intervals, config.n_causes);
    let mut lambda = Array::zeros(&[j, k]);
    for row in 0..j {
        lambda.data[row * k..(row + 1) * k].copy_from_slice(&h);
    }
    Ok(SubjectTruth::from_hazards(lambda).cif)
}

fn subject_rng(seed: u64, index: usize) -> ChaCha8Rng {
    // splitmix64 over (seed, index) so subjects are independent streams
    let mut z = seed ^ ((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// Generate a cohort and its analytic ground truth. Deterministic under
/// `seed`; subjects carry independent derived streams.
pub fn generate(config: &SynthConfig, seed: u64) -> Result<(Cohort, GroundTruth)> {
    config.validate()?;
    let schema = config.schema();
    let grid = config.grid();
    let (d, k, j_max) = (config.n_features, config.n_causes, config.n_intervals);

    let mut subjects = Vec::with_capacity(config.n_subjects);
    let mut truths = Vec::with_capacity(config.n_subjects);
    for i in 0..config.n_subjects {
        let mut rng = subject_rng(seed, i);

        // phase 1: full covariate paths over the grid, independent of outcome
        let mut states = vec![0u8; k];
        for c in 0..k {
            states[c] = if rng.gen::<f64>() < config.driver_prevalence[c] {
                1
            } else {
                0
            };
        }
        let mut values = Array::zeros(&[j_max, d]); // true value per cell
        let mut lambda = Array::zeros(&[j_max, k]);
        for j in 0..j_max {
            if j > 0 && config.driver_flip_prob > 0.0 {
                for s in states.iter_mut() {
                    if rng.gen::<f64>() < config.driver_flip_prob {
                        *s = 1 - *s;
                    }
                }
            }
            for c in 0..k {
                values.data[j * d + c] = states[c] as f64;
            }
            for f in k..d {
                values.data[j * d + f] = StandardNormal.sample(&mut rng);
            }
            lambda.data[j * k..(j + 1) * k].copy_from_slice(&config.hazards_for(&states));
        }

        // phase 2: missingness pattern (baseline always observed)
        let mut observed = vec![true; j_max * d];
        for j in 1..j_max {
            for f in 0..d {
                observed[j * d + f] = rng.gen::<f64>() >= config.missing_rate[f];
            }
        }

        // phase 3: one multinomial trial per interval over {causes, censor, survive}
        let mut event_interval = j_max;
        let mut event_cause = 0usize;
        for j in 0..j_max {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut decided = false;
            for c in 0..k {
                acc += lambda.data[j * k + c];
                if u < acc {
                    event_interval = j + 1;
                    event_cause = c + 1;
                    decided = true;
                    break;
                }
            }
            if decided {
                break;
            }
            if u < acc + config.censor_hazard {
                event_interval = j + 1;
                event_cause = 0;
                break;
            }
            // survived interval j+1: administrative censoring at J if it is the last
        }

        let mut obs: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); d];
        let mut last_observed = 0usize;
        for j in 0..event_interval.min(j_max) {
            for f in 0..d {
                if observed[j * d + f] {
                    obs[f].insert(j + 1, values.data[j * d + f]);
                    last_observed = last_observed.max(j + 1);
                }
            }
        }
        subjects.push(SubjectRecord {
            id: format!("s{:06}", i + 1),
            obs,
            event_interval,
            event_cause,
            last_observed,
        });
        truths.push(SubjectTruth::from_hazards(lambda));
    }

    Ok((
        Cohort {
            schema,
            grid,
            subjects,
        },
        GroundTruth { subjects: truths },
    ))
}

/// Write the analytic CIF grid alongside the cohort:
/// `subject_id,interval,cause,true_cif`.
pub fn write_ground_truth_csv(path: &Path, cohort: &Cohort, truth: &GroundTruth) -> Result<()> {
    if cohort.subjects.len() != truth.subjects.len() {
        return Err(CoreError::Validation(
            "ground truth is not aligned with the cohort".into(),
        ));
    }
    let mut out = String::from("subject_id,interval,cause,true_cif\n");
    for (s, t) in cohort.subjects.iter().zip(&truth.subjects) {
        let (j_max, k) = (t.cif.shape[0], t.cif.shape[1]);
        for j in 0..j_max {
            for c in 0..k {
                writeln!(
                    out,
                    "{},{},{},{}",
                    s.id,
                    j + 1,
                    c + 1,
                    t.cif.data[j * k + c]
                )
                .unwrap();
            }
        }
    }
    std::fs::write(path, out).map_err(|e| CoreError::io(path.display().to_string(), e))
}

/// Parse a `ground_truth.csv` back into per-subject CIF grids, in file order.
pub fn read_ground_truth_csv(path: &Path) -> Result<Vec<(String, Array)>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == "subject_id,interval,cause,true_cif" => {}
        _ => {
            return Err(CoreError::Csv {
                path: path.display().to_string(),
                line: 1,
                msg: "expected header `subject_id,interval,cause,true_cif`".into(),
            })
        }
    }
    // collect (interval, cause, value) per subject, preserving file order
    let mut order: Vec<String> = Vec::new();
    let mut cells: BTreeMap<String, Vec<(usize, usize, f64)>> = BTreeMap::new();
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
        let id = parts[0].trim().to_string();
        let j: usize = parts[1].trim().parse().map_err(|_| CoreError::Csv {
            path: path.display().to_string(),
            line,
            msg: format!("bad interval '{}'", parts[1]),
        })?;
        let c: usize = parts[2].trim().parse().map_err(|_| CoreError::Csv {
            path: path.display().to_string(),
            line,
            msg: format!("bad cause '{}'", parts[2]),
        })?;
        let v: f64 = parts[3].trim().parse().map_err(|_| CoreError::Csv {
            path: path.display().to_string(),
            line,
            msg: format!("bad true_cif '{}'", parts[3]),
        })?;
        if j == 0 || c == 0 {
            return Err(CoreError::Csv {
                path: path.display().to_string(),
                line,
                msg: "interval and cause are 1-based".into(),
            });
        }
        cells
            .entry(id.clone())
            .or_insert_with(|| {
                order.push(id);
                Vec::new()
            })
            .push((j, c, v));
    }
    let mut out = Vec::with_capacity(order.len());
    for id in order {
        let rows = cells.remove(&id).unwrap();
        let j_max = rows.iter().map(|r| r.0).max().unwrap();
        let k = rows.iter().map(|r| r.1).max().unwrap();
        if rows.len() != j_max * k {
            return Err(CoreError::Validation(format!(
                "subject {id}: expected a full {j_max}x{k} CIF grid, got {} rows",
                rows.len()
            )));
        }
        let mut grid = Array::zeros(&[j_max, k]);
        for (j, c, v) in rows {
            grid.data[(j - 1) * k + (c - 1)] = v;
        }
        out.push((id, grid));
    }
    Ok(out)
}
