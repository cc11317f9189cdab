//! Training loops, masking, differentiable sampling and data generation.

pub mod data;
pub mod masking;
pub mod stage1;
pub mod stage2;

pub use data::{check_invariants, gen_synthetic_dataset, render_heatmaps, sample_pose, Dataset, InvariantSummary, Sample};
pub use masking::{
    anneal_tau, argmax, gumbel_noise, gumbel_softmax, mask_at, mask_count, masking_ratio, perturbed_softmax, sample_mask, AnnealSchedule,
    MaskedSequence,
};
pub use stage1::{evaluate_tokenizer, train_tokenizer, PoseTargets, TokenizerEval, TokenizerLogRow, TokenizerTrainer};
pub use stage2::{
    mask_loss, masked_token_accuracy, pose_terms, total_loss, train_genhmr, GenHmrTrainer, PoseTargetVars, PoseTerms,
    Stage2Components, Stage2Data, Stage2LogRow, Stage2Loss, Stage2Weights,
};
