//! The three-step curriculum: language-model pretraining, sentiment head
//! training and counterfactual debiasing.

pub mod curriculum;
pub mod head;
pub mod optim;
pub mod reg;
pub mod train;

pub use curriculum::{CurriculumState, Stage, StageRecord};
pub use head::{build_head_dataset, train_sentiment_head, HeadDataConfig, HeadExample, HeadTrainConfig, SentimentHead};
pub use optim::Adam;
pub use reg::{
    debias, debias_step_dataset, embedding_reg_loss, fairness_loss_graph, mean_fairness_loss, sentiment_reg_loss,
    CounterfactualSite, DebiasConfig, DebiasInstance, DebiasLogRow, DebiasOutput, Method,
};
pub use train::{split_corpus, train_lm, TrainConfig};
