//! Word-level transformer language model.

pub mod infer;
pub mod model;
pub mod tape;
pub mod tensor;
pub mod vocab;

pub use infer::{perplexity, perplexity_subset, sample_continuations, LanguageModel};
pub use model::{HiddenStack, LmConfig, LmModel};
pub use vocab::Vocab;
