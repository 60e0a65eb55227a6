//! alignlab: a desk-scale laboratory for preference alignment.
//!
//! The crate implements, end to end and deterministically:
//!
//! * tabular-feature softmax policies over small token vocabularies
//!   ([`policy`]), with text checkpoints that round-trip bitwise;
//! * the Rao-Kupper tie-aware preference model and the sample weights it
//!   induces for direct preference optimization ([`preference`]);
//! * plain, weighted and NLL-regularized DPO losses/gradients and an
//!   iterative on-policy trainer ([`alignment`]);
//! * a synthetic hallucination task generator, oracle/learned judges, and
//!   the rollout -> annotate -> select pipeline that builds preference
//!   pairs ([`data`]);
//! * a probability-space simulator for the cross-entropy training ODE and
//!   on-/off-policy DPO contrast experiments ([`dynamics`]).
//!
//! Everything observable is a pure function of the configured seeds: reruns
//! are byte-identical, including under `--workers N` parallelism.

pub mod alignment;
pub mod cli;
pub mod config;
pub mod data;
pub mod dynamics;
pub mod math;
pub mod policy;
pub mod preference;
pub mod report;
pub mod seeds;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Crate-wide error type.
///
/// Variants are grouped by failure class rather than by module so callers
/// (notably the CLI, which maps them to process exit codes) can match on
/// intent: bad input vs. degenerate data vs. numerical violation.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A parameter is outside its documented domain (negative learning
    /// rate, ν < 1, token id out of vocabulary range, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Two objects that must agree on shape (vocabulary, feature dim,
    /// window) do not.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Non-finite number encountered where finite values are required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A config file or checkpoint could not be parsed, or contained an
    /// unknown or malformed key.
    #[error("config error: {0}")]
    Config(String),

    /// A selection/filter stage produced an empty preference set for an
    /// iteration that needs one.
    #[error("iteration {iteration}: preference set is empty after filtering")]
    EmptyPreferenceSet { iteration: usize },

    /// Input data is structurally valid but unusable (e.g. a single-class
    /// classifier corpus).
    #[error("degenerate data: {0}")]
    DegenerateData(String),

    /// An Euler update left the open simplex; the step size is too large
    /// for the current state.
    #[error(
        "euler step {step}: updated p[{token}] = {value:.6e} leaves (0, 1); \
         reduce the step size"
    )]
    StepSizeViolation {
        step: usize,
        token: usize,
        value: f64,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors that indicate degenerate data rather than caller
    /// mistakes (CLI exit code 3).
    pub fn is_degenerate_data(&self) -> bool {
        matches!(
            self,
            Error::EmptyPreferenceSet { .. } | Error::DegenerateData(_)
        )
    }

    /// True for numerical-violation errors (CLI exit code 4).
    pub fn is_numerical(&self) -> bool {
        matches!(self, Error::StepSizeViolation { .. } | Error::NonFinite(_))
    }
}
