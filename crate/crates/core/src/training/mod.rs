//! Pretraining data, MLM masking, the optimizer and schedule, and the
//! pretraining and fine-tuning loops.

pub mod corpus;
mod finetune;
mod masking;
mod mixture;
mod optim;
mod pretrain;

pub use finetune::{finetune, sample_negatives, sample_negatives_seeded, FinetuneConfig, FinetuneReport, PairData};
pub use masking::{mask_tokens, mask_tokens_seeded};
pub use mixture::{Example, LengthType, Mixture, MixtureSpec, MIN_VARIABLE_LEN};
pub use optim::{AdamW, AdamWConfig, Schedule};
pub use pretrain::{
    format_ablation, mixture_ablation, mlm_evaluate, pretrain, write_metrics_tsv, AblationRow, PretrainConfig,
    StepMetrics,
};
