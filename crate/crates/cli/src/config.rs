//! The run configuration file: one JSON document covering data, model,
//! training, refine head, and evaluation settings.
//!
//! Unknown keys are rejected. The top-level `seed` is the master seed: at
//! resolution time it overwrites the per-section seeds (`train.seed`,
//! `refine.gumbel.rng_seed`, `data.spec.seed`), and the `SERPENT_SEED`
//! environment variable overrides it in turn.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serpent_core::data::{generate_corpus, load_corpus, Example, Split, SyntheticSpec};
use serpent_core::error::{Error, Result};
use serpent_core::model::ModelConfig;
use serpent_core::refine::{AggregationStrategy, GumbelConfig, SimilarityMode};
use serpent_core::train::{LossWeights, TrainConfig, TrainSetup};

pub const SEED_ENV: &str = "SERPENT_SEED";

#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub spec: SyntheticSpec,
    /// Load this JSONL corpus instead of generating one.
    pub corpus_path: Option<String>,
    /// Load this split file instead of deriving a split.
    pub split_path: Option<String>,
    /// Explicit train/val/test counts; defaults to a 70/10/20 ratio split.
    pub split_counts: Option<(usize, usize, usize)>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RefineSection {
    pub gumbel: GumbelConfig,
    pub strategy: AggregationStrategy,
    pub similarity: SimilarityMode,
}

impl Default for RefineSection {
    fn default() -> Self {
        RefineSection {
            gumbel: GumbelConfig::default(),
            strategy: AggregationStrategy::AttentionWeighted,
            similarity: SimilarityMode::Dot,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub beam_width: usize,
    pub max_len: usize,
    pub variances: Vec<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            beam_width: 3,
            max_len: 32,
            variances: vec![0.0, 0.1, 0.2, 0.3, 0.5],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss_weights: LossWeights,
    pub refine: RefineSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| {
            Error::Config(format!("cannot read {}: {e}", path.as_ref().display()))
        })?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    /// Apply the master seed (and the `SERPENT_SEED` override) to every
    /// section, then validate.
    pub fn resolve(mut self) -> Result<Self> {
        if let Ok(s) = std::env::var(SEED_ENV) {
            self.seed = s
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV} must be an integer, got {s:?}")))?;
        }
        self.train.seed = self.seed;
        self.refine.gumbel.rng_seed = self.seed;
        self.data.spec.seed = self.seed;
        self.model.validate()?;
        self.train.validate()?;
        self.loss_weights.validate()?;
        self.data.spec.validate()?;
        Ok(self)
    }

    pub fn setup(&self) -> TrainSetup {
        TrainSetup {
            model: self.model.clone(),
            train: self.train.clone(),
            weights: self.loss_weights,
            gumbel: self.refine.gumbel.clone(),
            strategy: self.refine.strategy,
            similarity: self.refine.similarity,
        }
    }

    /// Load or generate the corpus and derive the split.
    pub fn load_data(&self) -> Result<(Vec<Example>, Split)> {
        let corpus = match &self.data.corpus_path {
            Some(path) => load_corpus(path)?,
            None => generate_corpus(&self.data.spec)?,
        };
        let split = match &self.data.split_path {
            Some(path) => Split::load(path)?,
            None => match self.data.split_counts {
                Some((train, val, test)) => {
                    Split::by_counts(corpus.len(), train, val, test, self.seed)?
                }
                None => Split::by_ratio(corpus.len(), self.seed),
            },
        };
        let max_index = split
            .train
            .iter()
            .chain(&split.val)
            .chain(&split.test)
            .copied()
            .max()
            .unwrap_or(0);
        if max_index >= corpus.len() {
            return Err(Error::Config(format!(
                "split references index {max_index} but corpus has {} examples",
                corpus.len()
            )));
        }
        Ok((corpus, split))
    }
}

/// Write the fully resolved config into an output directory.
pub fn write_resolved(dir: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(dir.join("resolved_config.json"), text + "\n")?;
    Ok(())
}
