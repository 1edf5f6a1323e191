//! Curriculum state: which steps have run, the resulting model and head, and
//! the configs and seeds that produced them.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::head::SentimentHead;
use crate::error::{Error, Result};
use crate::lm::LmModel;

pub const STATE_FORMAT: &str = "fairlm-state/v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Pretrained,
    HeadTrained,
    Debiased,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Pretrained => "pretrained",
            Stage::HeadTrained => "head_trained",
            Stage::Debiased => "debiased",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub seed: u64,
    pub config: serde_json::Value,
}

impl StageRecord {
    pub fn new(stage: Stage, seed: u64, config: &impl Serialize) -> Self {
        Self { stage, seed, config: serde_json::to_value(config).unwrap_or(serde_json::Value::Null) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumState {
    pub stage: Stage,
    pub model: LmModel,
    pub head: Option<SentimentHead>,
    pub provenance: Vec<StageRecord>,
}

#[derive(Serialize, Deserialize)]
struct StateFile {
    format: String,
    stage: Stage,
    has_head: bool,
    provenance: Vec<StageRecord>,
}

/// `<checkpoint>.head.json`.
pub fn head_path(checkpoint: &Path) -> PathBuf {
    sidecar(checkpoint, "head.json")
}

/// `<checkpoint>.state.json`.
pub fn state_path(checkpoint: &Path) -> PathBuf {
    sidecar(checkpoint, "state.json")
}

fn sidecar(checkpoint: &Path, suffix: &str) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

impl CurriculumState {
    pub fn pretrained(model: LmModel, record: StageRecord) -> Self {
        Self { stage: Stage::Pretrained, model, head: None, provenance: vec![record] }
    }

    pub fn with_head(mut self, head: SentimentHead, record: StageRecord) -> Result<Self> {
        if head.input_width() != self.model.config.width {
            return Err(Error::ShapeMismatch("head input width differs from model width".into()));
        }
        self.head = Some(head);
        self.stage = self.stage.max(Stage::HeadTrained);
        self.provenance.push(record);
        Ok(self)
    }

    /// Writes the model checkpoint at `path` plus `.head.json` and
    /// `.state.json` sidecars.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        self.model.save(path)?;
        if let Some(h) = &self.head {
            h.save(head_path(path))?;
        }
        let sp = state_path(path);
        let file = StateFile {
            format: STATE_FORMAT.into(),
            stage: self.stage,
            has_head: self.head.is_some(),
            provenance: self.provenance.clone(),
        };
        let json = serde_json::to_string_pretty(&file).map_err(|e| Error::json(&sp, e))?;
        std::fs::write(&sp, json + "\n").map_err(|e| Error::io(&sp, e))
    }

    /// Loads a checkpoint; without a state sidecar it is taken as a bare
    /// pretrained model.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let model = LmModel::load(path)?;
        let sp = state_path(path);
        if !sp.exists() {
            return Ok(Self { stage: Stage::Pretrained, model, head: None, provenance: Vec::new() });
        }
        let text = std::fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
        let file: StateFile = serde_json::from_str(&text).map_err(|e| Error::json(&sp, e))?;
        if file.format != STATE_FORMAT {
            return Err(Error::CheckpointVersion { found: file.format, expected: STATE_FORMAT.into() });
        }
        let head = if file.has_head { Some(SentimentHead::load(head_path(path))?) } else { None };
        if head.is_some() != (file.stage >= Stage::HeadTrained) {
            return Err(Error::InvalidConfig(format!("stage `{}` inconsistent with head presence", file.stage)));
        }
        Ok(Self { stage: file.stage, model, head, provenance: file.provenance })
    }
}
