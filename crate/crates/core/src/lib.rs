//! Counterfactual sentiment-bias evaluation and debiasing for small
//! word-level transformer language models.

pub mod data;
pub mod debias;
pub mod error;
pub mod fairness_spec;
pub mod harness;
pub mod lm;
pub mod metrics;
pub mod relevance;
pub mod sentiment;
pub mod text;

pub use error::{Error, Result};
