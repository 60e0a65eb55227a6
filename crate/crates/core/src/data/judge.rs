//! Hallucination judges: ground-truth oracle and learned classifier.
//!
//! A judge maps (prompt, response) to a hallucination probability in [0, 1]
//! plus the thresholded label at τ = 0.5, with the boundary score counting
//! as hallucinated. The oracle reads the prompt's hallucinated-token set
//! directly; with label noise ε > 0 it flips the true verdict independently
//! per (prompt, response) pair, derived deterministically from the noise
//! seed so annotation order never matters.

use rand::Rng;

use crate::data::classifier::LogisticClassifier;
use crate::data::records::{Label, PromptRecord};
use crate::policy::Token;
use crate::seeds;
use crate::{Error, Result};

/// Soft-score margin: a soft oracle reports δ for clean and 1−δ for
/// hallucinated responses so argmin/argmax stay meaningful under noise.
pub const DEFAULT_SOFT_DELTA: f64 = 0.01;

/// Score threshold separating clean from hallucinated; the boundary counts
/// as hallucinated.
pub const DEFAULT_TAU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleJudge {
    /// Probability of flipping the true label, in [0, 0.5).
    pub epsilon: f64,
    /// Report δ / 1−δ instead of hard 0 / 1.
    pub soft: bool,
    /// Soft-score margin δ ∈ (0, 0.5).
    pub delta: f64,
    /// Seed for the per-response flip decisions.
    pub noise_seed: u64,
}

impl OracleJudge {
    /// Exact oracle: no label noise, hard 0/1 scores.
    pub fn exact() -> Self {
        Self {
            epsilon: 0.0,
            soft: false,
            delta: DEFAULT_SOFT_DELTA,
            noise_seed: 0,
        }
    }
}

/// The two judge variants.
#[derive(Debug, Clone)]
pub enum Judge {
    Oracle(OracleJudge),
    Learned(LogisticClassifier),
}

/// One verdict: a score in [0, 1] and its thresholded label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Verdict {
    pub p_halluc: f64,
    pub label: Label,
}

impl Judge {
    pub fn oracle(epsilon: f64, soft: bool, noise_seed: u64) -> Result<Self> {
        if !(epsilon.is_finite() && (0.0..0.5).contains(&epsilon)) {
            return Err(Error::InvalidArgument(format!(
                "judge epsilon must lie in [0, 0.5), got {epsilon}"
            )));
        }
        Ok(Judge::Oracle(OracleJudge {
            epsilon,
            soft,
            delta: DEFAULT_SOFT_DELTA,
            noise_seed,
        }))
    }

    /// Scores one response. `response_id` individualizes the oracle's noise
    /// draw; it is ignored by the exact oracle and the learned classifier.
    pub fn judge(
        &self,
        prompt: &PromptRecord,
        response_id: u32,
        tokens: &[Token],
    ) -> Result<Verdict> {
        match self {
            Judge::Oracle(o) => {
                let mut hallucinated = prompt.contains_hallucination(tokens);
                if o.epsilon > 0.0 {
                    let mut rng = seeds::rng(seeds::derive_indexed(
                        o.noise_seed,
                        "judge-flip",
                        &[prompt.id, response_id as u64],
                    ));
                    if rng.random::<f64>() < o.epsilon {
                        hallucinated = !hallucinated;
                    }
                }
                let p_halluc = match (hallucinated, o.soft) {
                    (true, false) => 1.0,
                    (false, false) => 0.0,
                    (true, true) => 1.0 - o.delta,
                    (false, true) => o.delta,
                };
                Ok(Verdict {
                    p_halluc,
                    label: threshold(p_halluc),
                })
            }
            Judge::Learned(c) => {
                let p_halluc = c.score(prompt, tokens)?;
                Ok(Verdict {
                    p_halluc,
                    label: threshold(p_halluc),
                })
            }
        }
    }
}

/// τ = 0.5 thresholding with the boundary on the hallucinated side.
pub fn threshold(p_halluc: f64) -> Label {
    if p_halluc >= DEFAULT_TAU {
        Label::Hallucinated
    } else {
        Label::Clean
    }
}
