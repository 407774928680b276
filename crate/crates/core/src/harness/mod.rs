//! Clean pretraining, adversarial fine-tuning with ablation variants, and
//! evaluation.

mod eval;
mod train;

pub use eval::{
    block_structure_gap, eval_clean, evaluate, interclass_stats, similarity_matrices,
    superclass_confusion, EvalMetrics, MatrixSet, SimilarityMatrices, SuperclassConfusion,
};
pub use train::{
    finetune, finetune_observed, pretrain_clean, BatchView, FinetuneOutcome, PretrainOutcome,
    Recipe, SgdMomentum, TrainConfig, Variant, PRETRAIN_TEMPERATURE,
};
