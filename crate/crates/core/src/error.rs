use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // attribute specs and templates
    #[error("invalid attribute spec: {0}")]
    InvalidSpec(String),
    #[error("invalid template: {0}")]
    InvalidTemplate(String),
    #[error("unknown subgroup `{0}`")]
    UnknownSubgroup(String),
    #[error("input contains no token of subgroup `{0}`")]
    NoSensitiveToken(String),
    #[error("token `{token}` does not belong to subgroup `{subgroup}`")]
    TokenNotInSubgroup { token: String, subgroup: String },
    #[error("template {0} has a pronoun marker but the subgroup has no pronoun class")]
    UnresolvedPronoun(u32),
    #[error("template list is empty")]
    EmptyTemplates,
    #[error("attribute `{0}` has no counterfactual subgroup")]
    NoCounterfactual(String),

    // scoring and metrics
    #[error("cannot score an empty batch")]
    EmptyBatch,
    #[error("empty score distribution")]
    EmptyDistribution,
    #[error("sentiment score {0} outside [0, 1]")]
    InvalidScore(f64),
    #[error("no distribution for template {template}, value `{value}`")]
    MissingDistribution { template: u32, value: String },
    #[error("need at least two attribute values, got {0}")]
    TooFewValues(usize),

    // language model
    #[error("prefix of length {len} exceeds context length {max}")]
    PrefixTooLong { len: usize, max: usize },
    #[error("empty prefix")]
    EmptyPrefix,
    #[error("position {position} out of range for a prefix of length {len}")]
    PositionOutOfRange { position: usize, len: usize },
    #[error("corpus contains no predicted tokens")]
    EmptyCorpus,
    #[error("no sequence contains a sensitive token")]
    NoSensitiveSequences,
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    // training
    #[error("loss became non-finite at step {step}")]
    DivergedLoss { step: usize },
    #[error("no sentence passes the sentiment magnitude filter")]
    NoQualifyingSentences,
    #[error("dataset contains a single class")]
    SingleClassDataset,
    #[error("cosine distance undefined for a zero vector")]
    ZeroVector,
    #[error("curriculum stage `{have}` does not allow this step (needs `{need}`)")]
    WrongStage { have: String, need: String },

    // evaluation and harness
    #[error("no continuations to evaluate")]
    EmptyContinuations,
    #[error("invalid corpus config: {0}")]
    InvalidProbability(String),
    #[error("checkpoint format `{found}` is not supported (expected `{expected}`)")]
    CheckpointVersion { found: String, expected: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("{context}: {source}")]
    Context {
        context: String,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }

    pub fn context(self, context: impl Into<String>) -> Self {
        Error::Context { context: context.into(), source: Box::new(self) }
    }

    /// Configuration errors are the caller's fault; everything else is a runtime failure.
    pub fn is_config_error(&self) -> bool {
        match self {
            Error::InvalidSpec(_)
            | Error::InvalidTemplate(_)
            | Error::InvalidConfig(_)
            | Error::InvalidProbability(_)
            | Error::Json { .. }
            | Error::CheckpointVersion { .. } => true,
            Error::Context { source, .. } => source.is_config_error(),
            _ => false,
        }
    }

    /// Innermost error with all context layers removed.
    pub fn root(&self) -> &Error {
        match self {
            Error::Context { source, .. } => source.root(),
            e => e,
        }
    }
}
