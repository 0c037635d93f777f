//! Patient-level cross-validation, training, inference and fusion.

pub mod experiment;
pub mod infer;
pub mod prep;
pub mod split;
pub mod train;

pub use experiment::{ablate_cues, ablation_cases, run_full_experiment, AblationReport, ExperimentOutput, RunDir, BASELINE, SDL};
pub use infer::{input_tensor, majority_vote, network_input, predict, Prediction};
pub use prep::{prepare, prepare_manifest, PrepConfig, PreparedCase};
pub use split::{check_no_leakage, split_dataset, Fold, FoldPlan, SplitSizes};
pub use train::{select_best, train_fold, EpochLog, TrainOutcome, TrainSettings};
