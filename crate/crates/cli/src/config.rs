//! Run-config files for each subcommand. Every field can also be set by a flag.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use fairlm_core::debias::{HeadDataConfig, HeadTrainConfig, Method, TrainConfig};
use fairlm_core::harness::eval::ScorerChoice;
use fairlm_core::harness::{EvalSettings, ModelSettings};
use fairlm_core::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Reads `path` as JSON, or returns the default when no file is given.
pub fn load<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::json(p, e))
        }
    }
}

pub fn required<'a>(v: &'a Option<PathBuf>, name: &str) -> Result<&'a PathBuf> {
    v.as_ref().ok_or_else(|| Error::InvalidConfig(format!("`{name}` is required (config file or --{})", name.replace('_', "-"))))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenCorpusConfig {
    /// Attribute spec file; the built-in planted spec when absent.
    pub spec: Option<PathBuf>,
    pub positive_probability: BTreeMap<String, f64>,
    pub sentences: usize,
    pub seed: u64,
    pub filler_fraction: f64,
    pub out: Option<PathBuf>,
    pub test_out: Option<PathBuf>,
    pub test_fraction: f64,
    pub spec_out: Option<PathBuf>,
    pub templates_out: Option<PathBuf>,
}

impl Default for GenCorpusConfig {
    fn default() -> Self {
        Self {
            spec: None,
            positive_probability: [("A".to_string(), 0.9), ("B".to_string(), 0.1)].into(),
            sentences: 4000,
            seed: 0,
            filler_fraction: 0.3,
            out: None,
            test_out: None,
            test_fraction: 0.1,
            spec_out: None,
            templates_out: None,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRunConfig {
    pub corpus: Option<PathBuf>,
    pub val_corpus: Option<PathBuf>,
    pub spec: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Loss curve as CSV.
    pub curve: Option<PathBuf>,
    pub model: ModelSettings,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadRunConfig {
    pub checkpoint: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub scorer: ScorerChoice,
    pub data: HeadDataConfig,
    pub head: HeadTrainConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DebiasRunConfig {
    pub checkpoint: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub spec: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Metrics log (step, L_LM, L_fairness, total) as CSV.
    pub log: Option<PathBuf>,
    pub method: Method,
    pub lambda: f64,
    /// Defaults to a tenth of the pretraining steps.
    pub steps: Option<usize>,
    /// Defaults to a tenth of the pretraining learning rate.
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub seed: u64,
}

impl Default for DebiasRunConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            corpus: None,
            spec: None,
            out: None,
            log: None,
            method: Method::SentimentReg,
            lambda: 1.0,
            steps: None,
            lr: None,
            batch_size: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalFileConfig {
    pub checkpoint: Option<PathBuf>,
    pub spec: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub test_corpus: Option<PathBuf>,
    pub encoder_checkpoint: Option<PathBuf>,
    pub scorer: ScorerChoice,
    pub out: Option<PathBuf>,
    #[serde(flatten)]
    pub settings: EvalSettings,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepRunConfig {
    pub checkpoint: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub spec: Option<PathBuf>,
    pub templates: Option<PathBuf>,
    pub test_corpus: Option<PathBuf>,
    pub encoder_checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub scorer: ScorerChoice,
    pub methods: Vec<Method>,
    pub lambdas: Vec<f64>,
    pub steps: Option<usize>,
    pub lr: Option<f64>,
    pub batch_size: Option<usize>,
    pub seed: u64,
    pub eval: EvalSettings,
}

impl Default for SweepRunConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            corpus: None,
            spec: None,
            templates: None,
            test_corpus: None,
            encoder_checkpoint: None,
            out_dir: None,
            scorer: ScorerChoice::default(),
            methods: vec![Method::EmbeddingReg, Method::SentimentReg],
            lambdas: vec![0.0, 1.0, 10.0, 100.0],
            steps: None,
            lr: None,
            batch_size: None,
            seed: 0,
            eval: EvalSettings::default(),
        }
    }
}
