//! End-to-end pipelines: planted corpora, evaluation, sweeps and reports.

pub mod corpus;
pub mod eval;
pub mod report;
pub mod sweep;

pub use corpus::{generate_planted_corpus, planted_spec, planted_templates, read_corpus, write_corpus, PlantedBiasConfig};
pub use eval::{evaluate, evaluate_model, EvalInputs, EvalRunConfig, EvalSettings};
pub use sweep::{pretrain, sweep_lambda, train_head_stage, ModelSettings, SweepInputs, SweepRow};
