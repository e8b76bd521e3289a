//! Run configuration: a strict JSON file layered over built-in defaults,
//! then overridden by command-line flags.

use std::path::Path;

use horse_core::edit_math::Predecessor;
use horse_core::eval::CorpusConfig;
use horse_core::hypernet::HyperNetConfig;
use horse_core::model::BaseTrainConfig;
use horse_core::pipeline::{MemitConfig, Variant};
use horse_core::{EditError, ModelConfig, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditSection {
    pub batch_size: usize,
    /// Leading corpus edits to apply; all of them when absent.
    pub num_edits: Option<usize>,
    pub variant: Variant,
    pub predecessor: Predecessor,
    pub memit: MemitConfig,
    /// Edit counts for `edit --sweep`.
    pub sweep: Vec<usize>,
}

impl Default for EditSection {
    fn default() -> Self {
        Self {
            batch_size: 10,
            num_edits: None,
            variant: Variant::Full,
            predecessor: Predecessor::Orthogonalized,
            memit: MemitConfig::default(),
            sweep: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateSection {
    /// Seeds for a from-scratch ablation; the global seed alone when empty.
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradCheckSection {
    /// Central-difference step.
    pub step: f64,
    /// Largest accepted relative error.
    pub tolerance: f64,
    /// Entries checked per parameter tensor, evenly strided.
    pub max_entries: usize,
}

impl Default for GradCheckSection {
    fn default() -> Self {
        Self { step: 1e-5, tolerance: 1e-4, max_entries: 6 }
    }
}

/// Every tunable of every command. The global `seed` is copied into each
/// component's own seed field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub corpus: CorpusConfig,
    pub base_train: BaseTrainConfig,
    pub hyper: HyperNetConfig,
    pub edit: EditSection,
    pub ablate: AblateSection,
    pub grad_check: GradCheckSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = Self {
            seed: 7,
            model: ModelConfig::default(),
            corpus: CorpusConfig::default(),
            base_train: BaseTrainConfig::default(),
            hyper: HyperNetConfig::default(),
            edit: EditSection::default(),
            ablate: AblateSection::default(),
            grad_check: GradCheckSection::default(),
        };
        c.set_seed(7);
        c
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Parses a partial config; keys not given keep their defaults and
    /// unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<RunConfig> {
        let over: Value =
            serde_json::from_str(text).map_err(|e| EditError::Config(format!("config is not valid JSON: {e}")))?;
        if !over.is_object() {
            return Err(EditError::Config("config must be a JSON object".into()));
        }
        let mut base = serde_json::to_value(RunConfig::default())?;
        merge(&mut base, over);
        let mut cfg: RunConfig =
            serde_json::from_value(base).map_err(|e| EditError::Config(format!("config: {e}")))?;
        cfg.set_seed(cfg.seed);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| EditError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.model.seed = seed;
        self.corpus.seed = seed;
        self.hyper.seed = seed;
    }

    pub fn with_seed(&self, seed: u64) -> RunConfig {
        let mut c = self.clone();
        c.set_seed(seed);
        c
    }
}
