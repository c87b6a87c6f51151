//! Full model assembly: time-aware embedding, factorized attention encoder,
//! summarization, and cause-specific hazard heads, wired through one shared
//! parameter store. Also owns the text checkpoint format.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datamodel::{Batch, FeatureKind, FeatureSchema, FeatureSpec};
use crate::diffcore::{Array, NodeId, ParamStore, Tape};
use crate::embedding::{embed_batch, EmbeddingParams};
use crate::encoder::{encode, summarize, AttentionCapture, EncoderParams};
use crate::error::{CoreError, Result};
use crate::hazardheads::{decode_logits, HazardGrid, HeadParams};

pub const CHECKPOINT_HEADER: &str = "survgrid-checkpoint v1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub d_emb: usize,
    pub n_heads: usize,
    pub n_blocks: usize,
    /// Prediction horizon H used when landmarking training data.
    pub horizon: usize,
    /// Causal masking in temporal attention.
    pub causal: bool,
    /// Factorized attention; false folds covariates into the model width.
    pub factorized: bool,
    /// Staleness decay on missing embeddings.
    pub time_decay: bool,
    /// One summary query shared across covariates (vs one per covariate).
    pub shared_summary_query: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_emb: 16,
            n_heads: 2,
            n_blocks: 2,
            horizon: 10,
            causal: true,
            factorized: true,
            time_decay: true,
            shared_summary_query: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    /// Schema including fitted standardization statistics.
    pub schema: FeatureSchema,
    pub k: usize,
    pub store: ParamStore,
    pub embedding: EmbeddingParams,
    pub encoder: EncoderParams,
    pub heads: HeadParams,
}

/// Everything a caller needs from one forward pass.
pub struct ModelOutput {
    /// (B, H, K) hazard logits.
    pub logits: NodeId,
    /// (B, D * d_emb) context vectors.
    pub context: NodeId,
    pub captures: Vec<AttentionCapture>,
    /// Parameter leaves in store order, for gradient pull-back.
    pub leaves: Vec<NodeId>,
}

impl Model {
    pub fn init(schema: FeatureSchema, k: usize, config: ModelConfig, seed: u64) -> Result<Self> {
        let d = schema.d();
        let d_ctx = d * config.d_emb;
        let d_model = if config.factorized { config.d_emb } else { d_ctx };
        let n_queries = if config.shared_summary_query {
            1
        } else if config.factorized {
            d
        } else {
            1
        };

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let embedding =
            EmbeddingParams::init(&mut store, &schema, config.d_emb, config.time_decay, &mut rng)?;
        let encoder = EncoderParams::init(
            &mut store,
            d_model,
            config.n_heads,
            config.n_blocks,
            config.causal,
            config.factorized,
            n_queries,
            &mut rng,
        )?;
        let heads = HeadParams::init(&mut store, d_ctx, k, &mut rng)?;
        log::info!(
            "initialized model: {} tensors, {} scalars (d_emb={}, blocks={}, heads={}, K={k})",
            store.len(),
            store.n_scalars(),
            config.d_emb,
            config.n_blocks,
            config.n_heads,
        );
        Ok(Model {
            config,
            schema,
            k,
            store,
            embedding,
            encoder,
            heads,
        })
    }

    pub fn d(&self) -> usize {
        self.schema.d()
    }

    /// Context width D * d_emb.
    pub fn d_ctx(&self) -> usize {
        self.d() * self.config.d_emb
    }

    /// Run embedding, encoder, summarization, and heads over one batch.
    pub fn forward(&self, tape: &mut Tape, batch: &Batch) -> Result<ModelOutput> {
        if batch.d() != self.d() {
            return Err(CoreError::Validation(format!(
                "batch has {} features, model expects {}",
                batch.d(),
                self.d()
            )));
        }
        let leaves = self.store.leaves(tape);
        let zeta = embed_batch(tape, &self.embedding, &leaves, &batch.x, &batch.m, &batch.delta)?;
        let zeta = if self.config.factorized {
            zeta
        } else {
            tape.reshape(zeta, &[batch.b(), batch.s(), 1, self.d_ctx()])?
        };
        let (encoded, mut captures) = encode(tape, &leaves, &self.encoder, zeta, &batch.valid)?;
        let (context, sum_cap) = summarize(tape, &leaves, &self.encoder, encoded, &batch.valid)?;
        captures.push(sum_cap);
        let logits = decode_logits(tape, &leaves, &self.heads, context, batch.horizon())?;
        Ok(ModelOutput {
            logits,
            context,
            captures,
            leaves,
        })
    }

    /// Forward one batch in inference mode and derive per-subject hazard,
    /// survival, and CIF grids. `ids` pairs with the batch rows.
    pub fn predict_grids(&self, batch: &Batch, ids: &[String]) -> Result<Vec<(String, HazardGrid)>> {
        if ids.len() != batch.b() {
            return Err(CoreError::Validation(format!(
                "{} ids for a batch of {}",
                ids.len(),
                batch.b()
            )));
        }
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, batch)?;
        let logits = tape.val(out.logits);
        let (h, k) = (batch.horizon(), self.k);
        let mut grids = Vec::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            let slice = Array::new(
                vec![h, k],
                logits.data[i * h * k..(i + 1) * h * k].to_vec(),
            )?;
            grids.push((id.clone(), HazardGrid::from_logits(&slice)?));
        }
        Ok(grids)
    }

    /// Initialize each head's output bias so the initial per-interval hazards
    /// match the given marginal event rates: f_k = ln(r_k / (1 - sum_m r_m)).
    pub fn set_head_bias(&mut self, rates: &[f64]) -> Result<()> {
        if rates.len() != self.k {
            return Err(CoreError::Validation(format!(
                "{} rates for {} causes",
                rates.len(),
                self.k
            )));
        }
        let total: f64 = rates.iter().sum();
        if rates.iter().any(|r| !(*r > 0.0)) || !(total < 1.0) {
            return Err(CoreError::Validation(format!(
                "marginal rates must be positive and sum below 1, got {rates:?}"
            )));
        }
        for (head, &r) in self.heads.heads.iter().zip(rates) {
            self.store.get_mut(head.b2).value = Array::scalar((r / (1.0 - total)).ln());
        }
        Ok(())
    }

    /// Serialize config, schema (with standardization statistics), and every
    /// named parameter to a versioned text checkpoint.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        writeln!(out, "{CHECKPOINT_HEADER}").unwrap();
        writeln!(out, "k {}", self.k).unwrap();
        let c = &self.config;
        writeln!(out, "config d_emb {}", c.d_emb).unwrap();
        writeln!(out, "config n_heads {}", c.n_heads).unwrap();
        writeln!(out, "config n_blocks {}", c.n_blocks).unwrap();
        writeln!(out, "config horizon {}", c.horizon).unwrap();
        writeln!(out, "config causal {}", c.causal as u8).unwrap();
        writeln!(out, "config factorized {}", c.factorized as u8).unwrap();
        writeln!(out, "config time_decay {}", c.time_decay as u8).unwrap();
        writeln!(out, "config shared_summary_query {}", c.shared_summary_query as u8).unwrap();
        for f in &self.schema.features {
            match f.kind {
                FeatureKind::Numeric => {
                    writeln!(out, "feature {},numeric,{},{}", f.name, f.mean, f.std).unwrap()
                }
                FeatureKind::Categorical { cardinality } => {
                    writeln!(out, "feature {},categorical,{cardinality}", f.name).unwrap()
                }
            }
        }
        for p in self.store.iter() {
            write!(out, "param {}", p.name).unwrap();
            for d in &p.value.shape {
                write!(out, " {d}").unwrap();
            }
            out.push('\n');
            let mut first = true;
            for v in &p.value.data {
                if !first {
                    out.push(' ');
                }
                write!(out, "{v}").unwrap();
                first = false;
            }
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| CoreError::io(path.display().to_string(), e))
    }

    /// Restore a model from a checkpoint written by `save_checkpoint`.
    pub fn load_checkpoint(path: &Path) -> Result<Model> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CoreError::io(path.display().to_string(), e))?;
        let bad = |line: usize, msg: String| CoreError::Csv {
            path: path.display().to_string(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate().peekable();
        match lines.next() {
            Some((_, CHECKPOINT_HEADER)) => {}
            Some((_, other)) => {
                return Err(bad(1, format!("unsupported checkpoint header '{other}'")))
            }
            None => return Err(bad(1, "empty checkpoint".into())),
        }

        let mut k = None;
        let mut config = ModelConfig::default();
        let mut features = Vec::new();
        let mut params: Vec<(String, Array)> = Vec::new();
        while let Some((i, line)) = lines.next() {
            let lineno = i + 1;
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("k ") {
                k = Some(
                    rest.parse::<usize>()
                        .map_err(|_| bad(lineno, format!("bad cause count '{rest}'")))?,
                );
            } else if let Some(rest) = line.strip_prefix("config ") {
                let (key, val) = rest
                    .split_once(' ')
                    .ok_or_else(|| bad(lineno, "config needs `key value`".into()))?;
                let int = || {
                    val.parse::<usize>()
                        .map_err(|_| bad(lineno, format!("bad config value '{val}'")))
                };
                let flag = || int().map(|v| v != 0);
                match key {
                    "d_emb" => config.d_emb = int()?,
                    "n_heads" => config.n_heads = int()?,
                    "n_blocks" => config.n_blocks = int()?,
                    "horizon" => config.horizon = int()?,
                    "causal" => config.causal = flag()?,
                    "factorized" => config.factorized = flag()?,
                    "time_decay" => config.time_decay = flag()?,
                    "shared_summary_query" => config.shared_summary_query = flag()?,
                    other => return Err(bad(lineno, format!("unknown config key '{other}'"))),
                }
            } else if let Some(rest) = line.strip_prefix("feature ") {
                let parts: Vec<&str> = rest.split(',').collect();
                match parts.as_slice() {
                    [name, "numeric", mean, std] => {
                        let mut spec = FeatureSpec::numeric(*name);
                        spec.mean = mean
                            .parse()
                            .map_err(|_| bad(lineno, format!("bad mean '{mean}'")))?;
                        spec.std = std
                            .parse()
                            .map_err(|_| bad(lineno, format!("bad std '{std}'")))?;
                        features.push(spec);
                    }
                    [name, "categorical", card] => {
                        let cardinality = card
                            .parse()
                            .map_err(|_| bad(lineno, format!("bad cardinality '{card}'")))?;
                        features.push(FeatureSpec::categorical(*name, cardinality));
                    }
                    _ => return Err(bad(lineno, format!("bad feature line '{rest}'"))),
                }
            } else if let Some(rest) = line.strip_prefix("param ") {
                let mut parts = rest.split(' ');
                let name = parts
                    .next()
                    .ok_or_else(|| bad(lineno, "param needs a name".into()))?
                    .to_string();
                let shape: Vec<usize> = parts
                    .map(|p| {
                        p.parse::<usize>()
                            .map_err(|_| bad(lineno, format!("bad dimension '{p}'")))
                    })
                    .collect::<Result<_>>()?;
                let (vi, values_line) = lines
                    .next()
                    .ok_or_else(|| bad(lineno, format!("param {name} has no value line")))?;
                let data: Vec<f64> = values_line
                    .split(' ')
                    .map(|v| {
                        v.parse::<f64>()
                            .map_err(|_| bad(vi + 1, format!("bad value '{v}'")))
                    })
                    .collect::<Result<_>>()?;
                params.push((name, Array::new(shape, data)?));
            } else {
                return Err(bad(lineno, format!("unrecognized line '{line}'")));
            }
        }

        let k = k.ok_or_else(|| bad(1, "checkpoint missing cause count".into()))?;
        let schema = FeatureSchema::new(features)?;
        let mut model = Model::init(schema, k, config, 0)?;
        if params.len() != model.store.len() {
            return Err(CoreError::Validation(format!(
                "checkpoint has {} tensors, model wants {}",
                params.len(),
                model.store.len()
            )));
        }
        for (name, value) in params {
            let id = model.store.find(&name).ok_or_else(|| {
                CoreError::Validation(format!("checkpoint tensor '{name}' not in model"))
            })?;
            let slot = model.store.get_mut(id);
            if slot.value.shape != value.shape {
                return Err(CoreError::Validation(format!(
                    "tensor '{name}' has shape {:?}, model wants {:?}",
                    value.shape, slot.value.shape
                )));
            }
            slot.value = value;
        }
        Ok(model)
    }
}
