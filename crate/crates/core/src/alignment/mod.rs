//! Direct preference optimization: losses, gradients, and the iterative
//! on-policy trainer.

mod loss;
mod sweep;
mod trainer;

pub use loss::{
    evaluate_batch, log_prob_and_gradient, pair_loss, BatchEval, PairStats, PreferencePair,
    Weighting,
};
pub use sweep::{run_nu_sweep, NuSweepPoint, NuSweepReport, WeightCurvePoint, DEFAULT_SWEEP_NUS};
pub use trainer::{
    greedy_halluc_rate, nll_regularized_step, run_alignment, AlignmentOutcome, DataMode, EpochRow,
    IterationRow, IterationSpec, OptimizerKind, TrainerConfig, TrainingReport, WeightHistogram,
    WeightRefresh, WEIGHT_HIST_BINS,
};
