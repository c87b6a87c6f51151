//! Factorized attention encoder: alternating temporal and covariate
//! self-attention blocks over (B, S, D, d_emb) embeddings, followed by
//! learned-query summarization into a per-subject context vector.
//!
//! Temporal attention adds a sinusoidal positional table to the attention
//! input only (the residual branch carries the raw activations), masks
//! padded steps as keys, and is causal by default. Covariate attention uses
//! no positions and no mask, so it is permutation-equivariant over features.

use rand_chacha::ChaCha8Rng;

use crate::diffcore::{fan_in_normal, scaled_normal, Array, NodeId, ParamId, ParamStore, Tape};
use crate::error::{CoreError, Result};

pub const LN_EPS: f64 = 1e-5;

/// Q/K/V/output projection parameters for one multi-head attention.
#[derive(Debug, Clone)]
pub struct AttnParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

impl AttnParams {
    fn init(store: &mut ParamStore, prefix: &str, e: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let w = |store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str| {
            store.add(format!("{prefix}.{name}"), fan_in_normal(&[e, e], e, rng))
        };
        let wq = w(store, rng, "wq")?;
        let wk = w(store, rng, "wk")?;
        let wv = w(store, rng, "wv")?;
        let wo = w(store, rng, "wo")?;
        let b = |store: &mut ParamStore, name: &str| {
            store.add(format!("{prefix}.{name}"), Array::zeros(&[e]))
        };
        let bq = b(store, "bq")?;
        let bk = b(store, "bk")?;
        let bv = b(store, "bv")?;
        let bo = b(store, "bo")?;
        Ok(AttnParams {
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
        })
    }
}

#[derive(Debug, Clone)]
pub struct CovAttnParams {
    pub attn: AttnParams,
    pub ln_gain: ParamId,
    pub ln_bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub time: AttnParams,
    pub ln_time_gain: ParamId,
    pub ln_time_bias: ParamId,
    /// Covariate-axis attention; absent in the temporal-only variant, where
    /// the covariate axis is folded into the model dimension.
    pub cov: Option<CovAttnParams>,
}

/// Cross-attention pooling over time with a learnable query.
#[derive(Debug, Clone)]
pub struct SummaryParams {
    /// One shared query, or one per covariate when configured.
    pub queries: Vec<ParamId>,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    /// Width each attention operates on (the trailing axis of the input).
    pub d_model: usize,
    pub n_heads: usize,
    pub causal: bool,
    pub blocks: Vec<BlockParams>,
    pub summary: SummaryParams,
}

impl EncoderParams {
    /// Register encoder parameters. `factorized` controls whether blocks
    /// carry covariate attention; `n_queries` is 1 for a shared summary
    /// query or D for per-covariate queries.
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        d_model: usize,
        n_heads: usize,
        n_blocks: usize,
        causal: bool,
        factorized: bool,
        n_queries: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if n_blocks == 0 {
            return Err(CoreError::Validation("encoder needs at least 1 block".into()));
        }
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(CoreError::Validation(format!(
                "d_model {d_model} must be divisible by n_heads {n_heads}"
            )));
        }
        if n_queries == 0 {
            return Err(CoreError::Validation("summary needs at least 1 query".into()));
        }
        let e = d_model;
        let mut blocks = Vec::with_capacity(n_blocks);
        for i in 0..n_blocks {
            let time = AttnParams::init(store, &format!("encoder.block{i}.time"), e, rng)?;
            let ln_time_gain =
                store.add(format!("encoder.block{i}.ln_time.gain"), Array::full(&[e], 1.0))?;
            let ln_time_bias =
                store.add(format!("encoder.block{i}.ln_time.bias"), Array::zeros(&[e]))?;
            let cov = if factorized {
                let attn = AttnParams::init(store, &format!("encoder.block{i}.cov"), e, rng)?;
                let ln_gain =
                    store.add(format!("encoder.block{i}.ln_cov.gain"), Array::full(&[e], 1.0))?;
                let ln_bias =
                    store.add(format!("encoder.block{i}.ln_cov.bias"), Array::zeros(&[e]))?;
                Some(CovAttnParams {
                    attn,
                    ln_gain,
                    ln_bias,
                })
            } else {
                None
            };
            blocks.push(BlockParams {
                time,
                ln_time_gain,
                ln_time_bias,
                cov,
            });
        }

        let std_e = 1.0 / (e as f64).sqrt();
        let mut queries = Vec::with_capacity(n_queries);
        if n_queries == 1 {
            queries.push(store.add("encoder.summary.q", scaled_normal(&[e], std_e, rng))?);
        } else {
            for d in 0..n_queries {
                queries.push(store.add(
                    format!("encoder.summary.q{d}"),
                    scaled_normal(&[e], std_e, rng),
                )?);
            }
        }
        let summary = SummaryParams {
            queries,
            wk: store.add("encoder.summary.wk", fan_in_normal(&[e, e], e, rng))?,
            bk: store.add("encoder.summary.bk", Array::zeros(&[e]))?,
            wv: store.add("encoder.summary.wv", fan_in_normal(&[e, e], e, rng))?,
            bv: store.add("encoder.summary.bv", Array::zeros(&[e]))?,
            wo: store.add("encoder.summary.wo", fan_in_normal(&[e, e], e, rng))?,
            bo: store.add("encoder.summary.bo", Array::zeros(&[e]))?,
        };
        Ok(EncoderParams {
            d_model,
            n_heads,
            causal,
            blocks,
            summary,
        })
    }
}

/// Deterministic sinusoidal positional table of shape (len, dim):
/// row p holds sin and cos of (start + p) / 10000^(2i/dim) interleaved.
pub fn sinusoidal_table(len: usize, dim: usize, start: usize) -> Array {
    let mut data = vec![0.0; len * dim];
    for p in 0..len {
        let pos = (start + p) as f64;
        for i in 0..dim {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos / rate;
            data[p * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Array {
        shape: vec![len, dim],
        data,
    }
}

/// Which axis a captured attention matrix ranges over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttnStage {
    Time,
    Covariate,
    Summary,
}

/// One attention probability matrix captured during a forward pass:
/// `probs` has shape (groups * heads, Q, L).
#[derive(Debug, Clone)]
pub struct AttentionCapture {
    pub layer: usize,
    pub stage: AttnStage,
    pub probs: NodeId,
    pub heads: usize,
}

/// Affine map over the last axis of a rank-3 node: (G,L,E) -> (G,L,E).
fn linear3(tape: &mut Tape, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let shape = tape.val(x).shape.clone();
    let e = shape[2];
    let rows = shape[0] * shape[1];
    let flat = tape.reshape(x, &[rows, e])?;
    let y = tape.matmul(flat, w)?;
    let y = tape.add_row(y, b)?;
    tape.reshape(y, &shape)
}

/// Multi-head self-attention over the middle axis of (G, L, E).
/// `mask`, when given, has one bool per (G * n_heads, L, L) score.
/// Returns the projected output and the attention probabilities.
fn mha(
    tape: &mut Tape,
    leaves: &[NodeId],
    p: &AttnParams,
    x: NodeId,
    n_heads: usize,
    mask: Option<Vec<bool>>,
) -> Result<(NodeId, NodeId)> {
    let shape = tape.val(x).shape.clone();
    let (g, l, e) = (shape[0], shape[1], shape[2]);
    let hd = e / n_heads;

    let q = linear3(tape, x, leaves[p.wq.0], leaves[p.bq.0])?;
    let k = linear3(tape, x, leaves[p.wk.0], leaves[p.bk.0])?;
    let v = linear3(tape, x, leaves[p.wv.0], leaves[p.bv.0])?;

    let split = |tape: &mut Tape, t: NodeId| -> Result<NodeId> {
        let t = tape.reshape(t, &[g, l, n_heads, hd])?;
        let t = tape.permute(t, &[0, 2, 1, 3])?;
        tape.reshape(t, &[g * n_heads, l, hd])
    };
    let qh = split(tape, q)?;
    let kh = split(tape, k)?;
    let vh = split(tape, v)?;

    let scores = tape.bmm_nt(qh, kh)?;
    let scores = tape.scale(scores, 1.0 / (hd as f64).sqrt());
    let probs = tape.softmax_lastdim(scores, mask)?;
    let ctx = tape.bmm(probs, vh)?;

    let ctx = tape.reshape(ctx, &[g, n_heads, l, hd])?;
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = tape.reshape(ctx, &[g, l, e])?;
    let out = linear3(tape, ctx, leaves[p.wo.0], leaves[p.bo.0])?;
    Ok((out, probs))
}

fn check_input(enc: &EncoderParams, shape: &[usize], valid: &[bool]) -> Result<(usize, usize, usize)> {
    if shape.len() != 4 || shape[3] != enc.d_model {
        return Err(CoreError::shape(
            "encode",
            format!("want (B,S,D,{}), got {shape:?}", enc.d_model),
        ));
    }
    let (b, s, d) = (shape[0], shape[1], shape[2]);
    if valid.len() != b * s {
        return Err(CoreError::shape(
            "encode",
            format!("validity length {} vs B*S = {}", valid.len(), b * s),
        ));
    }
    for subj in 0..b {
        if !valid[subj * s..(subj + 1) * s].iter().any(|&v| v) {
            return Err(CoreError::Validation(format!(
                "subject {subj} has no valid steps"
            )));
        }
    }
    Ok((b, s, d))
}

/// Key mask for temporal attention: padded steps are never attended to, and
/// with causal masking a query at step q sees only keys at steps <= q.
fn temporal_mask(b: usize, s: usize, d: usize, n_heads: usize, valid: &[bool], causal: bool) -> Vec<bool> {
    let mut mask = vec![false; b * d * n_heads * s * s];
    let mut i = 0;
    for subj in 0..b {
        for _ in 0..d * n_heads {
            for q in 0..s {
                for k in 0..s {
                    mask[i] = valid[subj * s + k] && (!causal || k <= q);
                    i += 1;
                }
            }
        }
    }
    mask
}

/// One temporal-attention sublayer: LN(zeta + MHA(zeta + P)) over the time
/// axis, applied independently per (subject, covariate) trajectory.
pub fn temporal_attention(
    tape: &mut Tape,
    leaves: &[NodeId],
    enc: &EncoderParams,
    block: &BlockParams,
    zeta: NodeId,
    valid: &[bool],
) -> Result<(NodeId, NodeId)> {
    let shape = tape.val(zeta).shape.clone();
    let (b, s, d) = check_input(enc, &shape, valid)?;
    let e = enc.d_model;

    let x = tape.permute(zeta, &[0, 2, 1, 3])?;
    let x = tape.reshape(x, &[b * d, s, e])?;

    let table = sinusoidal_table(s, e, 0);
    let tiled = Array {
        shape: vec![b * d, s, e],
        data: table.data.repeat(b * d),
    };
    let pe = tape.leaf(tiled);
    let x_pe = tape.add(x, pe)?;

    let mask = temporal_mask(b, s, d, enc.n_heads, valid, enc.causal);
    let (attn, probs) = mha(tape, leaves, &block.time, x_pe, enc.n_heads, Some(mask))?;

    let res = tape.add(x, attn)?;
    let out = tape.layer_norm(
        res,
        leaves[block.ln_time_gain.0],
        leaves[block.ln_time_bias.0],
        LN_EPS,
    )?;
    let out = tape.reshape(out, &[b, d, s, e])?;
    let out = tape.permute(out, &[0, 2, 1, 3])?;
    Ok((out, probs))
}

/// One covariate-attention sublayer: LN(z + MHA(z)) over the covariate axis,
/// applied independently per (subject, step) slice. No positions, no mask.
pub fn covariate_attention(
    tape: &mut Tape,
    leaves: &[NodeId],
    enc: &EncoderParams,
    cov: &CovAttnParams,
    zeta_time: NodeId,
) -> Result<(NodeId, NodeId)> {
    let shape = tape.val(zeta_time).shape.clone();
    if shape.len() != 4 || shape[3] != enc.d_model {
        return Err(CoreError::shape(
            "covariate_attention",
            format!("want (B,S,D,{}), got {shape:?}", enc.d_model),
        ));
    }
    let (b, s, d, e) = (shape[0], shape[1], shape[2], shape[3]);
    let x = tape.reshape(zeta_time, &[b * s, d, e])?;
    let (attn, probs) = mha(tape, leaves, &cov.attn, x, enc.n_heads, None)?;
    let res = tape.add(x, attn)?;
    let out = tape.layer_norm(res, leaves[cov.ln_gain.0], leaves[cov.ln_bias.0], LN_EPS)?;
    let out = tape.reshape(out, &[b, s, d, e])?;
    Ok((out, probs))
}

/// Run the full block stack: temporal then covariate attention per block.
/// Returns the encoded activations and the captured attention matrices.
pub fn encode(
    tape: &mut Tape,
    leaves: &[NodeId],
    enc: &EncoderParams,
    zeta: NodeId,
    valid: &[bool],
) -> Result<(NodeId, Vec<AttentionCapture>)> {
    if enc.blocks.is_empty() {
        return Err(CoreError::Validation("encode needs at least 1 block".into()));
    }
    check_input(enc, &tape.val(zeta).shape, valid)?;
    let mut captures = Vec::new();
    let mut layer = 0;
    let mut h = zeta;
    for block in &enc.blocks {
        let (t, t_probs) = temporal_attention(tape, leaves, enc, block, h, valid)?;
        captures.push(AttentionCapture {
            layer,
            stage: AttnStage::Time,
            probs: t_probs,
            heads: enc.n_heads,
        });
        layer += 1;
        h = t;
        if let Some(cov) = &block.cov {
            let (c, c_probs) = covariate_attention(tape, leaves, enc, cov, h)?;
            captures.push(AttentionCapture {
                layer,
                stage: AttnStage::Covariate,
                probs: c_probs,
                heads: enc.n_heads,
            });
            layer += 1;
            h = c;
        }
    }
    Ok((h, captures))
}

/// Learned-query temporal pooling: for each covariate, attend over that
/// covariate's valid steps with the (shared or per-covariate) query, then
/// concatenate the D summaries into c of shape (B, D * d_model).
pub fn summarize(
    tape: &mut Tape,
    leaves: &[NodeId],
    enc: &EncoderParams,
    zeta_fa: NodeId,
    valid: &[bool],
) -> Result<(NodeId, AttentionCapture)> {
    let shape = tape.val(zeta_fa).shape.clone();
    let (b, s, d) = check_input(enc, &shape, valid)?;
    let e = enc.d_model;
    let sum = &enc.summary;
    if sum.queries.len() != 1 && sum.queries.len() != d {
        return Err(CoreError::Validation(format!(
            "{} summary queries for {d} covariates",
            sum.queries.len()
        )));
    }

    let x = tape.permute(zeta_fa, &[0, 2, 1, 3])?;
    let x = tape.reshape(x, &[b * d, s, e])?;
    let k = linear3(tape, x, leaves[sum.wk.0], leaves[sum.bk.0])?;
    let v = linear3(tape, x, leaves[sum.wv.0], leaves[sum.bv.0])?;

    let rows: Vec<NodeId> = sum
        .queries
        .iter()
        .map(|q| tape.reshape(leaves[q.0], &[1, e]))
        .collect::<Result<_>>()?;
    let qtable = tape.concat(&rows, 0)?;
    let idx: Vec<usize> = (0..b * d)
        .map(|g| if sum.queries.len() == 1 { 0 } else { g % d })
        .collect();
    let q = tape.gather_rows(qtable, &idx)?;
    let q = tape.reshape(q, &[b * d, 1, e])?;

    let scores = tape.bmm_nt(q, k)?;
    let scores = tape.scale(scores, 1.0 / (e as f64).sqrt());
    let mut mask = vec![false; b * d * s];
    let mut i = 0;
    for subj in 0..b {
        for _ in 0..d {
            for step in 0..s {
                mask[i] = valid[subj * s + step];
                i += 1;
            }
        }
    }
    let probs = tape.softmax_lastdim(scores, Some(mask))?;
    let pooled = tape.bmm(probs, v)?;
    let pooled = tape.reshape(pooled, &[b * d, e])?;
    let out = tape.matmul(pooled, leaves[sum.wo.0])?;
    let out = tape.add_row(out, leaves[sum.bo.0])?;
    let c = tape.reshape(out, &[b, d * e])?;
    let capture = AttentionCapture {
        layer: usize::MAX,
        stage: AttnStage::Summary,
        probs,
        heads: 1,
    };
    Ok((c, capture))
}

/// One averaged attention weight for the inspection dump.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub layer: usize,
    pub head: usize,
    pub query: usize,
    pub key: usize,
    pub weight: f64,
}

/// Flatten captured attention matrices into records, averaging each
/// (layer, head, query, key) weight over the group axis (subjects, and
/// covariates or steps depending on the stage).
pub fn attention_records(tape: &Tape, captures: &[AttentionCapture]) -> Vec<AttentionRecord> {
    let mut out = Vec::new();
    for cap in captures {
        let probs = tape.val(cap.probs);
        let (rows, q_len, k_len) = (probs.shape[0], probs.shape[1], probs.shape[2]);
        let groups = rows / cap.heads;
        for h in 0..cap.heads {
            for q in 0..q_len {
                for k in 0..k_len {
                    let mut acc = 0.0;
                    for g in 0..groups {
                        acc += probs.data[((g * cap.heads + h) * q_len + q) * k_len + k];
                    }
                    out.push(AttentionRecord {
                        layer: cap.layer,
                        head: h,
                        query: q,
                        key: k,
                        weight: acc / groups as f64,
                    });
                }
            }
        }
    }
    out
}

/// Write attention records as CSV: layer,head,query,key,weight.
pub fn write_attention_csv(path: &std::path::Path, records: &[AttentionRecord]) -> Result<()> {
    let mut text = String::from("layer,head,query,key,weight\n");
    for r in records {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            r.layer, r.head, r.query, r.key, r.weight
        ));
    }
    std::fs::write(path, text).map_err(|e| CoreError::io(path.display().to_string(), e))
}
