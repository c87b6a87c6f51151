//! Cause-specific decoder heads and the probabilistic output layer:
//! per-interval hazards, survival, and cumulative incidence.
//!
//! The context vector is broadcast over the prediction horizon, offset by a
//! sinusoidal positional table, and mapped by K independent two-layer GELU
//! heads to one logit per (step, cause). Hazards normalize logits against an
//! implicit zero-logit "no event" class, so each row sums strictly below 1.

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::diffcore::{fan_in_normal, Array, NodeId, ParamId, ParamStore, Tape};
use crate::encoder::sinusoidal_table;
use crate::error::{CoreError, Result};

/// Hazard clamp bounds applied before any downstream logarithm.
pub const HAZARD_FLOOR: f64 = 1e-12;
pub const HAZARD_CEIL: f64 = 1.0 - 1e-12;

/// One cause's head: two-layer map from the broadcast context to a logit.
#[derive(Debug, Clone)]
pub struct CauseHead {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone)]
pub struct HeadParams {
    /// Context width D * d_emb.
    pub d_ctx: usize,
    pub hidden: usize,
    pub heads: Vec<CauseHead>,
}

impl HeadParams {
    /// Register K identically shaped, independently initialized heads.
    /// Hidden width is half the context width.
    pub fn init(
        store: &mut ParamStore,
        d_ctx: usize,
        k: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if k == 0 {
            return Err(CoreError::Validation("need at least one cause head".into()));
        }
        if d_ctx < 2 {
            return Err(CoreError::Validation(format!(
                "context width {d_ctx} too small to halve"
            )));
        }
        let hidden = d_ctx / 2;
        let mut heads = Vec::with_capacity(k);
        for cause in 1..=k {
            heads.push(CauseHead {
                w1: store.add(
                    format!("heads.cause{cause}.w1"),
                    fan_in_normal(&[d_ctx, hidden], d_ctx, rng),
                )?,
                b1: store.add(format!("heads.cause{cause}.b1"), Array::zeros(&[hidden]))?,
                w2: store.add(
                    format!("heads.cause{cause}.w2"),
                    fan_in_normal(&[hidden, 1], hidden, rng),
                )?,
                b2: store.add(format!("heads.cause{cause}.b2"), Array::zeros(&[1]))?,
            });
        }
        Ok(HeadParams {
            d_ctx,
            hidden,
            heads,
        })
    }

    pub fn k(&self) -> usize {
        self.heads.len()
    }
}

/// Broadcast the context (B, D*d_emb) over H future steps, add the decoder
/// positional table at offsets 1..H, and stack per-cause logits to (B, H, K).
pub fn decode_logits(
    tape: &mut Tape,
    leaves: &[NodeId],
    params: &HeadParams,
    c: NodeId,
    horizon: usize,
) -> Result<NodeId> {
    let shape = tape.val(c).shape.clone();
    if shape.len() != 2 || shape[1] != params.d_ctx {
        return Err(CoreError::shape(
            "decode_logits",
            format!("want (B,{}), got {shape:?}", params.d_ctx),
        ));
    }
    if horizon == 0 {
        return Err(CoreError::Validation("horizon must be >= 1".into()));
    }
    let (b, de) = (shape[0], shape[1]);

    let c_step = tape.reshape(c, &[b, 1, de])?;
    let repeated = vec![c_step; horizon];
    let ctx = tape.concat(&repeated, 1)?;

    let table = sinusoidal_table(horizon, de, 1);
    let pe = tape.leaf(Array {
        shape: vec![b, horizon, de],
        data: table.data.repeat(b),
    });
    let ctx = tape.add(ctx, pe)?;
    let flat = tape.reshape(ctx, &[b * horizon, de])?;

    let mut cols = Vec::with_capacity(params.heads.len());
    for head in &params.heads {
        let h = tape.matmul(flat, leaves[head.w1.0])?;
        let h = tape.add_row(h, leaves[head.b1.0])?;
        let h = tape.gelu(h);
        let o = tape.matmul(h, leaves[head.w2.0])?;
        cols.push(tape.add_row(o, leaves[head.b2.0])?);
    }
    let logits = tape.concat(&cols, 1)?;
    tape.reshape(logits, &[b, horizon, params.heads.len()])
}

/// Per-interval cause-specific hazards from an (H, K) logit matrix:
/// lambda_{j,k} = exp(f_{j,k}) / (1 + sum_m exp(f_{j,m})), shift-stabilized,
/// floored away from 0, and with row totals capped strictly below 1.
pub fn hazards(logits: &Array) -> Result<Array> {
    if logits.rank() != 2 {
        return Err(CoreError::shape(
            "hazards",
            format!("want (H,K), got {:?}", logits.shape),
        ));
    }
    if !logits.all_finite() {
        return Err(CoreError::NonFinite("hazard logits"));
    }
    let (h, k) = (logits.shape[0], logits.shape[1]);
    let mut out = vec![0.0; h * k];
    for j in 0..h {
        let row = &logits.data[j * k..(j + 1) * k];
        let m = row.iter().fold(0.0_f64, |a, &b| a.max(b));
        let denom = (-m).exp() + row.iter().map(|f| (f - m).exp()).sum::<f64>();
        for (i, f) in row.iter().enumerate() {
            out[j * k + i] = ((f - m).exp() / denom).max(HAZARD_FLOOR);
        }
        // The exact row total is < 1, but once exp(-m) underflows the
        // floating-point total can round to 1; cap it so survival stays
        // strictly positive downstream.
        let total: f64 = out[j * k..(j + 1) * k].iter().sum();
        if total > HAZARD_CEIL {
            let scale = HAZARD_CEIL / total;
            for v in &mut out[j * k..(j + 1) * k] {
                *v *= scale;
            }
        }
    }
    Array::new(vec![h, k], out)
}

/// Event-free probability through each interval: S_j = prod_{l<=j}(1 - sum_k
/// lambda_{l,k}).
pub fn survival(lambda: &Array) -> Result<Vec<f64>> {
    if lambda.rank() != 2 {
        return Err(CoreError::shape(
            "survival",
            format!("want (H,K), got {:?}", lambda.shape),
        ));
    }
    let (h, k) = (lambda.shape[0], lambda.shape[1]);
    let mut s = Vec::with_capacity(h);
    let mut acc = 1.0;
    for j in 0..h {
        let total: f64 = lambda.data[j * k..(j + 1) * k].iter().sum();
        if !(total < 1.0) {
            return Err(CoreError::Validation(format!(
                "hazard row {j} sums to {total}, must stay below 1"
            )));
        }
        acc *= 1.0 - total;
        s.push(acc);
    }
    Ok(s)
}

/// Cumulative incidence F_{j,k} = sum_{l<=j} lambda_{l,k} * S_{l-1}, S_0 = 1.
pub fn cif(lambda: &Array, s: &[f64]) -> Result<Array> {
    if lambda.rank() != 2 || lambda.shape[0] != s.len() {
        return Err(CoreError::shape(
            "cif",
            format!("lambda {:?} vs survival length {}", lambda.shape, s.len()),
        ));
    }
    let (h, k) = (lambda.shape[0], lambda.shape[1]);
    let mut out = vec![0.0; h * k];
    for j in 0..h {
        let s_prev = if j == 0 { 1.0 } else { s[j - 1] };
        for cause in 0..k {
            let prev = if j == 0 { 0.0 } else { out[(j - 1) * k + cause] };
            out[j * k + cause] = prev + lambda.data[j * k + cause] * s_prev;
        }
    }
    Array::new(vec![h, k], out)
}

/// One subject's full predictive distribution over the horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct HazardGrid {
    pub hazard: Array,
    pub survival: Vec<f64>,
    pub cif: Array,
}

impl HazardGrid {
    /// Derive hazards, survival, and CIF from raw logits, enforcing the
    /// probabilistic invariants (bounded hazards, nonincreasing survival,
    /// conservation of total mass).
    pub fn from_logits(logits: &Array) -> Result<Self> {
        let lambda = hazards(logits)?;
        let s = survival(&lambda)?;
        let f = cif(&lambda, &s)?;
        let grid = HazardGrid {
            hazard: lambda,
            survival: s,
            cif: f,
        };
        grid.check()?;
        Ok(grid)
    }

    pub fn h(&self) -> usize {
        self.hazard.shape[0]
    }

    pub fn k(&self) -> usize {
        self.hazard.shape[1]
    }

    /// Validate the distribution invariants; used after construction and
    /// after reading predictions back from disk.
    pub fn check(&self) -> Result<()> {
        let (h, k) = (self.h(), self.k());
        if self.survival.len() != h || self.cif.shape != vec![h, k] {
            return Err(CoreError::shape(
                "hazard grid",
                format!(
                    "hazard {:?}, survival {}, cif {:?}",
                    self.hazard.shape,
                    self.survival.len(),
                    self.cif.shape
                ),
            ));
        }
        let mut s_prev = 1.0;
        for j in 0..h {
            let row = &self.hazard.data[j * k..(j + 1) * k];
            if row.iter().any(|&l| !(l > 0.0 && l < 1.0)) {
                return Err(CoreError::Validation(format!(
                    "hazards outside (0,1) at interval {}",
                    j + 1
                )));
            }
            let s = self.survival[j];
            if !(s > 0.0 && s <= s_prev) {
                return Err(CoreError::Validation(format!(
                    "survival not positive nonincreasing at interval {}",
                    j + 1
                )));
            }
            s_prev = s;
            for cause in 0..k {
                let f = self.cif.data[j * k + cause];
                let f_prev = if j == 0 { 0.0 } else { self.cif.data[(j - 1) * k + cause] };
                if f + 1e-15 < f_prev {
                    return Err(CoreError::Validation(format!(
                        "cumulative incidence decreases at interval {} cause {}",
                        j + 1,
                        cause + 1
                    )));
                }
            }
        }
        let total: f64 =
            self.cif.data[(h - 1) * k..].iter().sum::<f64>() + self.survival[h - 1];
        if (total - 1.0).abs() > 1e-12 {
            return Err(CoreError::Validation(format!(
                "probability mass {total} differs from 1 beyond 1e-12"
            )));
        }
        Ok(())
    }
}

/// Write per-subject predictions as CSV:
/// `subject_id,interval_offset,cause,hazard,cif,survival`.
pub fn write_predictions(path: &Path, preds: &[(String, HazardGrid)]) -> Result<()> {
    let mut text = String::from("subject_id,interval_offset,cause,hazard,cif,survival\n");
    for (id, grid) in preds {
        let k = grid.k();
        for j in 0..grid.h() {
            for cause in 0..k {
                text.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    id,
                    j + 1,
                    cause + 1,
                    grid.hazard.data[j * k + cause],
                    grid.cif.data[j * k + cause],
                    grid.survival[j]
                ));
            }
        }
    }
    std::fs::write(path, text).map_err(|e| CoreError::io(path.display().to_string(), e))
}

/// Read predictions back, validating rectangular per-subject grids and the
/// distribution invariants.
pub fn read_predictions(path: &Path) -> Result<Vec<(String, HazardGrid)>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CoreError::io(path.display().to_string(), e))?;
    let err = |line: usize, msg: String| CoreError::Csv {
        path: path.display().to_string(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "subject_id,interval_offset,cause,hazard,cif,survival")) => {}
        _ => return Err(err(1, "bad or missing prediction header".into())),
    }

    // subject -> (offset, cause) -> (hazard, cif, survival), order-preserving
    let mut order: Vec<String> = Vec::new();
    let mut rows: Vec<Vec<(usize, usize, f64, f64, f64)>> = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 6 {
            return Err(err(lineno, format!("expected 6 fields, got {}", parts.len())));
        }
        let num = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| err(lineno, format!("bad {what} '{s}'")))
        };
        let idx = |s: &str, what: &str| -> Result<usize> {
            s.parse::<usize>()
                .map_err(|_| err(lineno, format!("bad {what} '{s}'")))
        };
        let subject = parts[0].to_string();
        let offset = idx(parts[1], "interval offset")?;
        let cause = idx(parts[2], "cause")?;
        if offset == 0 || cause == 0 {
            return Err(err(lineno, "offsets and causes are 1-based".into()));
        }
        let tuple = (
            offset,
            cause,
            num(parts[3], "hazard")?,
            num(parts[4], "cif")?,
            num(parts[5], "survival")?,
        );
        match order.iter().position(|s| s == &subject) {
            Some(p) => rows[p].push(tuple),
            None => {
                order.push(subject);
                rows.push(vec![tuple]);
            }
        }
    }
    if order.is_empty() {
        return Err(err(1, "no prediction rows".into()));
    }

    let mut out = Vec::with_capacity(order.len());
    for (subject, entries) in order.into_iter().zip(rows) {
        let h = entries.iter().map(|e| e.0).max().unwrap();
        let k = entries.iter().map(|e| e.1).max().unwrap();
        if entries.len() != h * k {
            return Err(CoreError::Validation(format!(
                "subject {subject}: {} rows, expected {h}x{k}",
                entries.len()
            )));
        }
        let mut hazard = Array::zeros(&[h, k]);
        let mut cif_m = Array::zeros(&[h, k]);
        let mut surv = vec![f64::NAN; h];
        for (offset, cause, lam, f, s) in entries {
            let cell = (offset - 1) * k + (cause - 1);
            hazard.data[cell] = lam;
            cif_m.data[cell] = f;
            if surv[offset - 1].is_nan() {
                surv[offset - 1] = s;
            } else if surv[offset - 1] != s {
                return Err(CoreError::Validation(format!(
                    "subject {subject}: inconsistent survival at offset {offset}"
                )));
            }
        }
        let grid = HazardGrid {
            hazard,
            survival: surv,
            cif: cif_m,
        };
        grid.check()?;
        out.push((subject, grid));
    }
    Ok(out)
}
