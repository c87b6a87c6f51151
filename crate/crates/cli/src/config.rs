//! Flat key=value configuration: one documented key list shared by the config
//! file, `--set` overrides, and the dedicated flags.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use survgrid_core::metrics::{CtdConvention, EvalConfig};
use survgrid_core::model::ModelConfig;
use survgrid_core::synthgen::SynthConfig;
use survgrid_core::training::TrainConfig;

/// Every key the configuration understands. Unknown keys are rejected so
/// typos fail loudly instead of silently falling back to defaults.
pub const KNOWN_KEYS: &[&str] = &[
    // model
    "d_emb",
    "n_heads",
    "n_blocks",
    "horizon",
    "causal",
    "factorized",
    "time_decay",
    "shared_summary_query",
    // training
    "epochs",
    "batch_size",
    "lr",
    "weight_decay",
    "patience",
    "val_fraction",
    "resample_landmarks",
    "init_head_bias",
    "seed",
    // synthetic generator
    "subjects",
    "features",
    "causes",
    "intervals",
    "base_hazard",
    "multiplier",
    "censor_hazard",
    "prevalence",
    "flip_prob",
    "missing_rate",
    // evaluation
    "bins",
    "ctd_convention",
    "tau",
    // cross-validation
    "folds",
    // dataset metadata
    "grid_width",
];

/// Parsed key=value settings with typed accessors. Values are kept as strings
/// until a command asks for them, so a config file can carry keys for several
/// pipeline stages at once.
#[derive(Debug, Clone, Default)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    /// Read a config file (blank lines and `#` comments allowed). `None`
    /// yields empty settings: every key at its default.
    pub fn load(path: Option<&Path>) -> Result<Settings> {
        let mut settings = Settings::default();
        let Some(path) = path else {
            return Ok(settings);
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                anyhow!("{}:{}: expected key=value, got `{line}`", path.display(), idx + 1)
            })?;
            let key = key.trim();
            if settings.values.contains_key(key) {
                bail!("{}:{}: duplicate key `{key}`", path.display(), idx + 1);
            }
            settings
                .set(key, value.trim())
                .with_context(|| format!("{}:{}", path.display(), idx + 1))?;
        }
        Ok(settings)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) -> Result<()> {
        if !KNOWN_KEYS.contains(&key) {
            bail!("unknown configuration key `{key}`");
        }
        self.values.insert(key.to_string(), value.into());
        Ok(())
    }

    /// Apply repeatable `--set KEY=VALUE` overrides.
    pub fn apply_overrides(&mut self, pairs: &[String]) -> Result<()> {
        for pair in pairs {
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| anyhow!("--set expects KEY=VALUE, got `{pair}`"))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    fn parsed<T>(&self, key: &str, default: T) -> Result<T>
    where
        T: std::str::FromStr,
        T::Err: std::fmt::Display,
    {
        match self.values.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|e| anyhow!("configuration key `{key}`: cannot parse `{v}`: {e}")),
        }
    }

    pub fn usize_or(&self, key: &str, default: usize) -> Result<usize> {
        self.parsed(key, default)
    }

    pub fn u64_or(&self, key: &str, default: u64) -> Result<u64> {
        self.parsed(key, default)
    }

    pub fn f64_or(&self, key: &str, default: f64) -> Result<f64> {
        self.parsed(key, default)
    }

    pub fn bool_or(&self, key: &str, default: bool) -> Result<bool> {
        match self.values.get(key).map(String::as_str) {
            None => Ok(default),
            Some("1") | Some("true") => Ok(true),
            Some("0") | Some("false") => Ok(false),
            Some(v) => bail!("configuration key `{key}`: expected 0/1/true/false, got `{v}`"),
        }
    }

    pub fn str_or(&self, key: &str, default: &str) -> String {
        self.values
            .get(key)
            .cloned()
            .unwrap_or_else(|| default.to_string())
    }

    pub fn require_usize(&self, key: &str) -> Result<usize> {
        let v = self
            .values
            .get(key)
            .ok_or_else(|| anyhow!("missing required configuration key `{key}`"))?;
        v.parse()
            .map_err(|e| anyhow!("configuration key `{key}`: cannot parse `{v}`: {e}"))
    }
}

pub fn model_config(s: &Settings) -> Result<ModelConfig> {
    let d = ModelConfig::default();
    Ok(ModelConfig {
        d_emb: s.usize_or("d_emb", d.d_emb)?,
        n_heads: s.usize_or("n_heads", d.n_heads)?,
        n_blocks: s.usize_or("n_blocks", d.n_blocks)?,
        horizon: s.usize_or("horizon", d.horizon)?,
        causal: s.bool_or("causal", d.causal)?,
        factorized: s.bool_or("factorized", d.factorized)?,
        time_decay: s.bool_or("time_decay", d.time_decay)?,
        shared_summary_query: s.bool_or("shared_summary_query", d.shared_summary_query)?,
    })
}

pub fn train_config(s: &Settings) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    Ok(TrainConfig {
        epochs: s.usize_or("epochs", d.epochs)?,
        batch_size: s.usize_or("batch_size", d.batch_size)?,
        lr: s.f64_or("lr", d.lr)?,
        weight_decay: s.f64_or("weight_decay", d.weight_decay)?,
        patience: s.usize_or("patience", d.patience)?,
        val_fraction: s.f64_or("val_fraction", d.val_fraction)?,
        seed: s.u64_or("seed", d.seed)?,
        resample_landmarks: s.bool_or("resample_landmarks", d.resample_landmarks)?,
        init_head_bias: s.bool_or("init_head_bias", d.init_head_bias)?,
    })
}

/// Build the generator configuration: one binary driver per cause multiplying
/// that cause's baseline hazard, remaining features as numeric noise, and
/// scalar keys broadcast across causes and features.
pub fn synth_config(s: &Settings) -> Result<SynthConfig> {
    let causes = s.usize_or("causes", 2)?;
    let features = s.usize_or("features", 4)?;
    let multiplier = s.f64_or("multiplier", 3.0)?;
    let mut effect = vec![vec![1.0; causes]; features];
    for c in 0..causes.min(features) {
        effect[c][c] = multiplier;
    }
    Ok(SynthConfig {
        n_subjects: s.usize_or("subjects", 2000)?,
        n_features: features,
        n_causes: causes,
        n_intervals: s.usize_or("intervals", 40)?,
        base_hazards: vec![s.f64_or("base_hazard", 0.13)?; causes],
        effect_multipliers: effect,
        missing_rate: vec![s.f64_or("missing_rate", 0.0)?; features],
        censor_hazard: s.f64_or("censor_hazard", 0.13)?,
        driver_prevalence: vec![s.f64_or("prevalence", 0.65)?; causes],
        driver_flip_prob: s.f64_or("flip_prob", 0.0)?,
        seed: s.u64_or("seed", 0)?,
    })
}

pub fn eval_config(s: &Settings) -> Result<EvalConfig> {
    let ctd_convention = match s.str_or("ctd_convention", "earlier").as_str() {
        "earlier" => CtdConvention::EarlierTime,
        "pair" => CtdConvention::PairTimes,
        v => bail!("configuration key `ctd_convention`: expected earlier|pair, got `{v}`"),
    };
    Ok(EvalConfig {
        bins: s.usize_or("bins", 10)?,
        ctd_convention,
    })
}
