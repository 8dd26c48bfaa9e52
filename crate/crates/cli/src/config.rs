use std::path::Path;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use trajforge_core::ingest::IngestParams;
use trajforge_core::metrics::MetricsConfig;
use trajforge_core::{GridSpec, TimeSpec};
use trajforge_generate::{ConstraintParams, GenConfig};
use trajforge_lm::{LoraConfig, ModelConfig, TrainConfig};

/// Every tunable of a run. Loaded from TOML; unknown keys are errors.
///
/// The top-level `seed` drives every stage through named sub-streams and
/// overrides the per-section `seed` fields.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Required by `ingest`; later stages read the grid from their inputs.
    pub grid: Option<GridSpec>,
    pub time: TimeSpec,
    pub ingest: IngestParams,
    /// `vocab_size` is filled in from the grid and time spec.
    pub model: ModelConfig,
    /// When present, training attaches an adapter with these settings.
    pub lora: Option<LoraConfig>,
    pub train: TrainConfig,
    pub generate: GenConfig,
    pub metrics: MetricsConfig,
    pub constraints: ConstraintParams,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, seed: Option<u64>) -> anyhow::Result<Self> {
        let mut cfg: RunConfig = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(s) = seed {
            cfg.seed = s;
        }
        cfg.train.seed = cfg.seed;
        cfg.generate.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if let Some(g) = &self.grid {
            g.check().context("invalid [grid]")?;
        }
        self.time.check().context("invalid [time]")?;
        if !(self.ingest.radius_km > 0.0 && self.ingest.min_minutes >= 0.0) {
            bail!("invalid [ingest]: radius_km must be positive and min_minutes non-negative");
        }
        let probe = ModelConfig { vocab_size: self.model.vocab_size.max(1), ..self.model.clone() };
        probe.validate().context("invalid [model]")?;
        if let Some(l) = &self.lora {
            l.validate(&probe).context("invalid [lora]")?;
        }
        self.train.validate().context("invalid [train]")?;
        self.generate.validate().context("invalid [generate]")?;
        Ok(())
    }
}
