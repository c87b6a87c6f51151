//! Time-aware covariate embedding: per-feature value embedders, learnable
//! missing embeddings, and exponential staleness decay.
//!
//! Each cell (subject, interval, feature) embeds to a d_emb vector. Observed
//! cells go through the feature's value embedder; missing cells use the
//! feature's missing embedding, attenuated by exp(-gamma * staleness) with
//! gamma = softplus(rho) kept positive by construction.

use rand_chacha::ChaCha8Rng;

use crate::datamodel::{FeatureKind, FeatureSchema};
use crate::diffcore::{fan_in_normal, scaled_normal, Array, NodeId, ParamId, ParamStore, Tape};
use crate::error::{CoreError, Result};

/// Raw decay parameter initial value: softplus(RHO_INIT) ~= 0.1.
pub const RHO_INIT: f64 = -2.252_168_461_044_090_6;

#[derive(Debug, Clone)]
pub enum ValueEmbedder {
    /// Scalar -> d_emb two-layer map with GELU.
    Numeric {
        w1: ParamId,
        b1: ParamId,
        w2: ParamId,
        b2: ParamId,
    },
    /// Cardinality x d_emb lookup table.
    Categorical { table: ParamId, cardinality: usize },
}

#[derive(Debug, Clone)]
pub struct FeatureEmbedder {
    pub value: ValueEmbedder,
    /// The missing embedding z^d, shape (d_emb,).
    pub missing: ParamId,
    /// Raw decay parameter rho^d, shape (1,); absent when time decay is
    /// ablated, so the two variants have different parameter counts.
    pub decay: Option<ParamId>,
}

#[derive(Debug, Clone)]
pub struct EmbeddingParams {
    pub d_emb: usize,
    pub features: Vec<FeatureEmbedder>,
}

impl EmbeddingParams {
    /// Register embedding parameters for every feature in schema order.
    pub fn init(
        store: &mut ParamStore,
        schema: &FeatureSchema,
        d_emb: usize,
        time_decay: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if d_emb == 0 {
            return Err(CoreError::Validation("d_emb must be >= 1".into()));
        }
        let std_emb = 1.0 / (d_emb as f64).sqrt();
        let mut features = Vec::with_capacity(schema.d());
        for spec in &schema.features {
            let prefix = format!("embed.{}", spec.name);
            let value = match spec.kind {
                FeatureKind::Numeric => ValueEmbedder::Numeric {
                    w1: store.add(
                        format!("{prefix}.w1"),
                        fan_in_normal(&[1, d_emb], 1, rng),
                    )?,
                    b1: store.add(format!("{prefix}.b1"), Array::zeros(&[d_emb]))?,
                    w2: store.add(
                        format!("{prefix}.w2"),
                        fan_in_normal(&[d_emb, d_emb], d_emb, rng),
                    )?,
                    b2: store.add(format!("{prefix}.b2"), Array::zeros(&[d_emb]))?,
                },
                FeatureKind::Categorical { cardinality } => ValueEmbedder::Categorical {
                    table: store.add(
                        format!("{prefix}.table"),
                        scaled_normal(&[cardinality, d_emb], std_emb, rng),
                    )?,
                    cardinality,
                },
            };
            let missing = store.add(
                format!("{prefix}.missing"),
                scaled_normal(&[d_emb], std_emb, rng),
            )?;
            let decay = if time_decay {
                Some(store.add(format!("{prefix}.decay"), Array::scalar(RHO_INIT))?)
            } else {
                None
            };
            features.push(FeatureEmbedder {
                value,
                missing,
                decay,
            });
        }
        Ok(EmbeddingParams { d_emb, features })
    }

    /// Ablated view of the same parameters: the decay gate is dropped, so
    /// missing cells use z^d regardless of staleness.
    pub fn without_time_decay(&self) -> Self {
        let mut out = self.clone();
        for f in &mut out.features {
            f.decay = None;
        }
        out
    }
}

/// Embed one feature column: `x_col`, `m_col`, `delta_col` are (R,1) leaves
/// for R cells of feature `d`. Returns the (R, d_emb) embedded block.
fn embed_feature(
    tape: &mut Tape,
    params: &EmbeddingParams,
    leaves: &[NodeId],
    d: usize,
    x_raw: &[f64],
    m_raw: &[f64],
    delta_raw: &[f64],
) -> Result<NodeId> {
    let e = params.d_emb;
    let r = x_raw.len();
    let feature = &params.features[d];

    let observed = match feature.value {
        ValueEmbedder::Numeric { w1, b1, w2, b2 } => {
            let x_col = tape.leaf(Array {
                shape: vec![r, 1],
                data: x_raw.to_vec(),
            });
            let h = tape.matmul(x_col, leaves[w1.0])?;
            let h = tape.add_row(h, leaves[b1.0])?;
            let h = tape.gelu(h);
            let out = tape.matmul(h, leaves[w2.0])?;
            tape.add_row(out, leaves[b2.0])?
        }
        ValueEmbedder::Categorical { table, cardinality } => {
            let mut idx = Vec::with_capacity(r);
            for &v in x_raw {
                if v.fract() != 0.0 || v < 0.0 || v >= cardinality as f64 {
                    return Err(CoreError::Validation(format!(
                        "category index {v} outside 0..{cardinality} for feature {d}"
                    )));
                }
                idx.push(v as usize);
            }
            tape.gather_rows(leaves[table.0], &idx)?
        }
    };

    let zeros = tape.leaf(Array::zeros(&[r, e]));
    let z_bcast = tape.add_row(zeros, leaves[feature.missing.0])?;
    let missing = match feature.decay {
        Some(rho) => {
            let gamma = tape.softplus(leaves[rho.0]);
            let delta_col = tape.leaf(Array {
                shape: vec![r, 1],
                data: delta_raw.to_vec(),
            });
            let scaled = tape.mul_scalar_node(delta_col, gamma)?;
            let neg = tape.scale(scaled, -1.0);
            let decay = tape.exp(neg);
            tape.mul_col(z_bcast, decay)?
        }
        None => z_bcast,
    };

    let miss_gate = tape.leaf(Array {
        shape: vec![r, 1],
        data: m_raw.to_vec(),
    });
    let obs_gate = tape.leaf(Array {
        shape: vec![r, 1],
        data: m_raw.iter().map(|&m| 1.0 - m).collect(),
    });
    let obs_part = tape.mul_col(observed, obs_gate)?;
    let miss_part = tape.mul_col(missing, miss_gate)?;
    tape.add(obs_part, miss_part)
}

/// Embed a full batch: X, M, Delta are (B,S,D); the result is (B,S,D,d_emb).
/// Padded steps take the missing path with delta 0 and are masked out by the
/// encoder; they still embed to finite values.
pub fn embed_batch(
    tape: &mut Tape,
    params: &EmbeddingParams,
    leaves: &[NodeId],
    x: &Array,
    m: &Array,
    delta: &Array,
) -> Result<NodeId> {
    if x.rank() != 3 || x.shape != m.shape || x.shape != delta.shape {
        return Err(CoreError::shape(
            "embed_batch",
            format!("{:?} / {:?} / {:?}", x.shape, m.shape, delta.shape),
        ));
    }
    let (b, s, d) = (x.shape[0], x.shape[1], x.shape[2]);
    if d != params.features.len() {
        return Err(CoreError::Validation(format!(
            "batch has {d} features, embedding has {}",
            params.features.len()
        )));
    }
    let r = b * s;
    let mut per_feature = Vec::with_capacity(d);
    for f in 0..d {
        let take = |src: &Array| -> Vec<f64> {
            (0..r).map(|cell| src.data[cell * d + f]).collect()
        };
        let block = embed_feature(
            tape,
            params,
            leaves,
            f,
            &take(x),
            &take(m),
            &take(delta),
        )?;
        per_feature.push(tape.reshape(block, &[r, 1, params.d_emb])?);
    }
    let stacked = tape.concat(&per_feature, 1)?;
    tape.reshape(stacked, &[b, s, d, params.d_emb])
}

/// Embed a single cell of feature `d` (convenience built on the batch path).
pub fn embed_cell(
    store: &ParamStore,
    params: &EmbeddingParams,
    d: usize,
    x: f64,
    m: f64,
    delta: f64,
) -> Result<Array> {
    if delta < 0.0 {
        return Err(CoreError::Validation(format!("negative staleness {delta}")));
    }
    if m != 0.0 && m != 1.0 {
        return Err(CoreError::Validation(format!("mask must be 0 or 1, got {m}")));
    }
    let mut tape = Tape::new();
    let leaves = store.leaves(&mut tape);
    let out = embed_feature(&mut tape, params, &leaves, d, &[x], &[m], &[delta])?;
    let out = tape.reshape(out, &[params.d_emb])?;
    Ok(tape.val(out).clone())
}
