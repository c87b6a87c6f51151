//! Weighted discrete-time competing-risk likelihood, class weights, AdamW,
//! and the training loop with per-epoch landmark resampling and early
//! stopping on validation loss.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datamodel::{make_batch, sample_landmark, Batch, Cohort, LandmarkedSubject};
use crate::diffcore::{Array, NodeId, ParamStore, Tape};
use crate::error::{CoreError, Result};
use crate::hazardheads::{HAZARD_CEIL, HAZARD_FLOOR};
use crate::model::{Model, ModelConfig};

/// Per-cause loss weights, min-normalized so the most frequent cause gets 1.
#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub w: Vec<f64>,
}

/// w^k = ln(1 + N_train / N_k) over the given training subjects, normalized
/// so min_k w^k = 1. Every cause must have at least one event.
pub fn class_weights(cohort: &Cohort, train_idx: &[usize], k: usize) -> Result<LossWeights> {
    if k == 0 {
        return Err(CoreError::Validation("need at least one cause".into()));
    }
    let mut counts = vec![0usize; k];
    for &i in train_idx {
        let cause = cohort.subjects[i].event_cause;
        if cause > 0 {
            if cause > k {
                return Err(CoreError::Validation(format!(
                    "subject {} has cause {cause}, beyond K={k}",
                    cohort.subjects[i].id
                )));
            }
            counts[cause - 1] += 1;
        }
    }
    let n = train_idx.len() as f64;
    let mut w = Vec::with_capacity(k);
    for (idx, &c) in counts.iter().enumerate() {
        if c == 0 {
            return Err(CoreError::Validation(format!(
                "cause {} has no events in the training split",
                idx + 1
            )));
        }
        w.push((1.0 + n / c as f64).ln());
    }
    let min = w.iter().cloned().fold(f64::INFINITY, f64::min);
    for v in &mut w {
        *v /= min;
    }
    Ok(LossWeights { w })
}

/// The loss as tape nodes: `total` sums over subjects, `mean` divides by the
/// batch size. Optimization steps use the mean; both are reported.
pub struct LossNodes {
    pub total: NodeId,
    pub mean: NodeId,
}

/// Weighted negative log-likelihood over masked horizon intervals:
/// -sum_i sum_j [ sum_k w^k y ln lambda + (1 - sum_k y) ln(1 - sum_k lambda) ].
/// Event terms carry the cause weight; survival terms are unweighted.
pub fn nll_loss(
    tape: &mut Tape,
    logits: NodeId,
    y: &Array,
    loss_mask: &Array,
    weights: &LossWeights,
) -> Result<LossNodes> {
    let shape = tape.val(logits).shape.clone();
    if shape.len() != 3 {
        return Err(CoreError::shape(
            "nll_loss",
            format!("want (B,H,K) logits, got {shape:?}"),
        ));
    }
    let (b, h, k) = (shape[0], shape[1], shape[2]);
    if y.shape != shape {
        return Err(CoreError::shape(
            "nll_loss",
            format!("labels {:?} vs logits {shape:?}", y.shape),
        ));
    }
    if loss_mask.shape != vec![b, h] {
        return Err(CoreError::shape(
            "nll_loss",
            format!("mask {:?} vs (B,H) = ({b},{h})", loss_mask.shape),
        ));
    }
    if weights.w.len() != k {
        return Err(CoreError::Validation(format!(
            "{} weights for {k} causes",
            weights.w.len()
        )));
    }
    if !tape.val(logits).all_finite() {
        return Err(CoreError::NonFinite("hazard logits"));
    }

    let lambda = tape.hazard_norm(logits);
    let lambda = tape.clamp(lambda, HAZARD_FLOOR, HAZARD_CEIL);

    // Event term: ln lambda weighted by w^k * y * mask per cell.
    let mut event_coeff = vec![0.0; b * h * k];
    for i in 0..b {
        for j in 0..h {
            let mask = loss_mask.data[i * h + j];
            for cause in 0..k {
                let cell = (i * h + j) * k + cause;
                event_coeff[cell] = weights.w[cause] * y.data[cell] * mask;
            }
        }
    }
    let event_coeff = tape.leaf(Array {
        shape: vec![b, h, k],
        data: event_coeff,
    });
    let ln_lambda = tape.ln(lambda)?;
    let event = tape.mul(ln_lambda, event_coeff)?;
    let event_sum = tape.sum_all(event);

    // Survival term: ln(1 - sum_k lambda) on masked event-free intervals.
    let mut surv_coeff = vec![0.0; b * h];
    for i in 0..b {
        for j in 0..h {
            let y_sum: f64 = (0..k).map(|c| y.data[(i * h + j) * k + c]).sum();
            surv_coeff[i * h + j] = (1.0 - y_sum) * loss_mask.data[i * h + j];
        }
    }
    let surv_coeff = tape.leaf(Array {
        shape: vec![b, h, 1],
        data: surv_coeff,
    });
    let total_hazard = tape.sum_last_keep(lambda);
    let neg = tape.scale(total_hazard, -1.0);
    let surv_prob = tape.add_scalar(neg, 1.0);
    let surv_prob = tape.clamp(surv_prob, HAZARD_FLOOR, HAZARD_CEIL);
    let ln_surv = tape.ln(surv_prob)?;
    let surv = tape.mul(ln_surv, surv_coeff)?;
    let surv_sum = tape.sum_all(surv);

    let pos = tape.add(event_sum, surv_sum)?;
    let total = tape.scale(pos, -1.0);
    let mean = tape.scale(total, 1.0 / b as f64);
    Ok(LossNodes { total, mean })
}

/// Decoupled-weight-decay Adam: theta <- theta - lr * (m_hat / (sqrt(v_hat)
/// + eps) + wd * theta), with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Array>,
    v: Vec<Array>,
}

impl AdamW {
    pub const DEFAULT_LR: f64 = 1e-4;
    pub const DEFAULT_WEIGHT_DECAY: f64 = 1e-5;

    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let m = store.iter().map(|p| Array::zeros(&p.value.shape)).collect();
        let v = store.iter().map(|p| Array::zeros(&p.value.shape)).collect();
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m,
            v,
        }
    }

    /// Apply one update from the gradients currently held in the store.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.m.len() != store.len() {
            return Err(CoreError::Validation(format!(
                "optimizer tracks {} tensors, store has {}",
                self.m.len(),
                store.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (idx, p) in store.iter_mut().enumerate() {
            if p.grad.shape != p.value.shape {
                return Err(CoreError::shape(
                    "adamw_step",
                    format!("grad {:?} vs value {:?} for {}", p.grad.shape, p.value.shape, p.name),
                ));
            }
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            for i in 0..p.value.data.len() {
                let g = p.grad.data[i];
                if !g.is_finite() {
                    return Err(CoreError::NonFinite("gradient"));
                }
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * g;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m.data[i] / bc1;
                let v_hat = v.data[i] / bc2;
                p.value.data[i] -=
                    self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * p.value.data[i]);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub val_fraction: f64,
    pub seed: u64,
    /// Redraw landmarks every epoch (augmentation); false freezes the
    /// epoch-0 draw.
    pub resample_landmarks: bool,
    /// Start head biases at the training split's marginal hazard rates.
    pub init_head_bias: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            lr: AdamW::DEFAULT_LR,
            weight_decay: AdamW::DEFAULT_WEIGHT_DECAY,
            patience: 5,
            val_fraction: 0.2,
            seed: 0,
            resample_landmarks: true,
            init_head_bias: true,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean loss per subject over the epoch's training batches.
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub weights: LossWeights,
    pub best_epoch: usize,
    /// Subjects with no valid landmark (first-interval events), skipped.
    pub skipped_subjects: usize,
    pub train_subjects: usize,
    pub val_subjects: usize,
}

fn draw_landmarks(
    cohort: &Cohort,
    idx: &[usize],
    horizon: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<LandmarkedSubject>, usize)> {
    let mut items = Vec::with_capacity(idx.len());
    let mut skipped = 0;
    for &i in idx {
        match sample_landmark(&cohort.subjects[i], &cohort.schema, horizon, k, rng)? {
            Some(lm) => items.push(lm),
            None => skipped += 1,
        }
    }
    Ok((items, skipped))
}

fn batch_losses(model: &Model, batch: &Batch, weights: &LossWeights) -> Result<(f64, f64)> {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, batch)?;
    let loss = nll_loss(&mut tape, out.logits, &batch.y, &batch.loss_mask, weights)?;
    Ok((tape.val(loss.total).data[0], tape.val(loss.mean).data[0]))
}

fn eval_mean_loss(
    model: &Model,
    items: &[LandmarkedSubject],
    batch_size: usize,
    weights: &LossWeights,
) -> Result<f64> {
    let mut total = 0.0;
    for chunk in items.chunks(batch_size) {
        let batch = make_batch(chunk)?;
        total += batch_losses(model, &batch, weights)?.0;
    }
    Ok(total / items.len() as f64)
}

/// Marginal per-interval hazard of each cause over the training subjects:
/// events of cause k divided by total person-intervals at risk.
fn marginal_rates(cohort: &Cohort, train_idx: &[usize], k: usize) -> Vec<f64> {
    let mut events = vec![0usize; k];
    let mut exposure = 0usize;
    for &i in train_idx {
        let s = &cohort.subjects[i];
        exposure += s.event_interval;
        if s.event_cause > 0 && s.event_cause <= k {
            events[s.event_cause - 1] += 1;
        }
    }
    events
        .iter()
        .map(|&e| (e as f64 / exposure.max(1) as f64).max(1e-6))
        .collect()
}

/// Split, standardize, and fit the model with AdamW; per-epoch landmark
/// resampling, early stopping on validation loss, best-epoch parameters
/// restored on return. Deterministic for a fixed seed.
pub fn train(cohort: &Cohort, k: usize, mconfig: ModelConfig, tconfig: &TrainConfig) -> Result<TrainOutcome> {
    if tconfig.epochs == 0 || tconfig.batch_size == 0 {
        return Err(CoreError::Validation(
            "epochs and batch size must be at least 1".into(),
        ));
    }
    if !(tconfig.val_fraction > 0.0 && tconfig.val_fraction < 1.0) {
        return Err(CoreError::Validation(format!(
            "validation fraction must lie in (0,1), got {}",
            tconfig.val_fraction
        )));
    }
    let n = cohort.subjects.len();
    if n < 2 {
        return Err(CoreError::Validation("need at least 2 subjects".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(tconfig.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_val = ((n as f64 * tconfig.val_fraction).round() as usize).clamp(1, n - 1);
    let val_idx: Vec<usize> = order[..n_val].to_vec();
    let train_idx: Vec<usize> = order[n_val..].to_vec();

    let mut schema = cohort.schema.clone();
    schema.fit_standardization(cohort, &train_idx);
    let std_cohort = Cohort {
        schema: schema.clone(),
        grid: cohort.grid,
        subjects: cohort.subjects.clone(),
    };

    let weights = class_weights(cohort, &train_idx, k)?;
    let mut model = Model::init(schema, k, mconfig, tconfig.seed)?;
    if tconfig.init_head_bias {
        let rates = marginal_rates(cohort, &train_idx, k);
        if rates.iter().sum::<f64>() < 1.0 {
            model.set_head_bias(&rates)?;
        } else {
            log::warn!("marginal rates sum to >= 1; keeping zero head biases");
        }
    }
    let mut opt = AdamW::new(&model.store, tconfig.lr, tconfig.weight_decay);

    let horizon = model.config.horizon;
    let (val_items, val_skipped) = draw_landmarks(&std_cohort, &val_idx, horizon, k, &mut rng)?;
    if val_items.is_empty() {
        return Err(CoreError::Validation(
            "validation split has no subjects with usable landmarks".into(),
        ));
    }
    let (mut train_items, train_skipped) =
        draw_landmarks(&std_cohort, &train_idx, horizon, k, &mut rng)?;
    if train_items.is_empty() {
        return Err(CoreError::Validation(
            "training split has no subjects with usable landmarks".into(),
        ));
    }
    if train_skipped + val_skipped > 0 {
        log::info!(
            "skipped {} subjects with first-interval events",
            train_skipped + val_skipped
        );
    }

    let mut log_rows = Vec::with_capacity(tconfig.epochs);
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut best_store: Option<ParamStore> = None;
    let mut stale = 0usize;

    for epoch in 0..tconfig.epochs {
        let started = Instant::now();
        if tconfig.resample_landmarks && epoch > 0 {
            let (redrawn, _) = draw_landmarks(&std_cohort, &train_idx, horizon, k, &mut rng)?;
            train_items = redrawn;
        }
        let mut view: Vec<usize> = (0..train_items.len()).collect();
        view.shuffle(&mut rng);

        let mut epoch_total = 0.0;
        let mut seen = 0usize;
        for (batch_no, chunk) in view.chunks(tconfig.batch_size).enumerate() {
            let items: Vec<LandmarkedSubject> =
                chunk.iter().map(|&i| train_items[i].clone()).collect();
            let context = |e: CoreError| {
                CoreError::Validation(format!(
                    "training diverged at epoch {epoch}, batch {batch_no}: {e}"
                ))
            };
            let batch = make_batch(&items)?;
            let mut tape = Tape::new();
            let out = model.forward(&mut tape, &batch).map_err(context)?;
            let loss = nll_loss(&mut tape, out.logits, &batch.y, &batch.loss_mask, &weights)
                .map_err(context)?;
            let total_val = tape.val(loss.total).data[0];
            if !total_val.is_finite() {
                return Err(CoreError::Validation(format!(
                    "training diverged at epoch {epoch}, batch {batch_no}: loss {total_val}"
                )));
            }
            tape.backward(loss.mean).map_err(context)?;
            model.store.pull_grads(&tape, &out.leaves);
            opt.step(&mut model.store).map_err(context)?;
            epoch_total += total_val;
            seen += items.len();
        }

        let train_loss = epoch_total / seen as f64;
        let val_loss = eval_mean_loss(&model, &val_items, tconfig.batch_size, &weights)
            .map_err(|e| {
                CoreError::Validation(format!("validation diverged at epoch {epoch}: {e}"))
            })?;
        if !val_loss.is_finite() {
            return Err(CoreError::Validation(format!(
                "validation loss diverged at epoch {epoch}: {val_loss}"
            )));
        }
        let seconds = started.elapsed().as_secs_f64();
        log::info!(
            "epoch {epoch}: train {train_loss:.6} val {val_loss:.6} ({seconds:.2}s)"
        );
        log_rows.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
            lr: tconfig.lr,
            seconds,
        });

        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_store = Some(model.store.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale > tconfig.patience {
                log::info!("early stop at epoch {epoch}; best epoch {best_epoch}");
                break;
            }
        }
    }

    if let Some(store) = best_store {
        model.store = store;
    }
    Ok(TrainOutcome {
        model,
        log: log_rows,
        weights,
        best_epoch,
        skipped_subjects: train_skipped + val_skipped,
        train_subjects: train_idx.len(),
        val_subjects: val_idx.len(),
    })
}

/// Write the training log CSV: `epoch,train_loss,val_loss,lr,seconds`.
pub fn write_training_log(path: &Path, rows: &[EpochLog]) -> Result<()> {
    let mut text = String::from("epoch,train_loss,val_loss,lr,seconds\n");
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.train_loss, r.val_loss, r.lr, r.seconds
        ));
    }
    std::fs::write(path, text).map_err(|e| CoreError::io(path.display().to_string(), e))
}
