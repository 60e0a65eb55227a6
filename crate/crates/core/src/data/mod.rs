//! Synthetic task data: generation, judging, classification, and the
//! rollout → annotate → select pipeline that produces preference pairs.

mod classifier;
mod judge;
mod pipeline;
mod records;
mod task;

pub use classifier::{
    build_train_set, logistic_loss_and_gradient, train_classifier, ClassifierTrainSet,
    FeatureRecipe, LogisticClassifier, TrainedClassifier, PROMPT_IDENTITY_DIM,
};
pub use judge::{threshold, Judge, OracleJudge, Verdict, DEFAULT_SOFT_DELTA, DEFAULT_TAU};
pub use pipeline::{
    annotate_records, build_offpolicy_dataset, build_preference_dataset, group_annotated,
    sample_rollout_records, sample_rollouts, select_pair, AnnotatedResponse, AnnotatedSet,
    FilterStats, OffPolicyStats, SamplingConfig, Selection,
};
pub use records::{
    read_jsonl, write_jsonl, AnnotationRecord, Label, PairRecord, PromptRecord, RolloutRecord,
};
pub use task::{
    generate_task, halluc_size, Task, TaskConfig, DEFAULT_GT_LEN, DEFAULT_HALLUC_SHARPNESS,
};
