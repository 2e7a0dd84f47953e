//! Optimizer, schedule, checkpoints and the two-stage training procedure.

pub mod checkpoint;
mod sgd;
mod trainer;

pub use checkpoint::Checkpoint;
pub use sgd::{lr_at_epoch, sgd_step, Sgd, SgdConfig};
pub use trainer::{
    branch_checkpoint, branch_from_checkpoint, checkpoint_modality, compute_signals, config_hash, evaluate_branch,
    evaluate_fusion, fusion_checkpoint, fusion_from_checkpoint, log_csv, predict_branch, predict_signals,
    train_branch, train_fusion, BranchRun, EpochRecord, FusionRun, FusionSettings, EVAL_BATCH,
};
