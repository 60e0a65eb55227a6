//! Tie-aware preference modelling.
//!
//! The Rao-Kupper model extends Bradley-Terry with a tie band of width
//! ln ν (ν ≥ 1). With Δ = r_i − r_j:
//!
//! ```text
//! p(i ≻ j) = 1 / (1 + ν e^{-Δ})
//! p(j ≻ i) = 1 / (1 + ν e^{+Δ})
//! p(tie)   = (ν² − 1) e^{-|Δ|} / ((1 + ν e^{-|Δ|}) (ν + e^{-|Δ|}))
//! ```
//!
//! The three probabilities sum to 1 algebraically; the tie term is computed
//! from e^{-|Δ|} ∈ (0, 1], so it is overflow-safe and exactly even in Δ.
//! At ν = 1 the tie band vanishes and the model reduces to Bradley-Terry.
//!
//! The sample weight used by weighted DPO is `p_tie(margin) + 2/(ν+1)`,
//! treated as a constant during differentiation (stop-gradient): it rescales
//! a pair's gradient contribution but is never differentiated through. It
//! peaks at exactly 1 for margin 0 and decays to 2/(ν+1) for confident
//! margins, so low-margin (ambiguous) pairs dominate training.

use crate::{Error, Result};

/// Outcome of a single annotated comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PreferenceOutcome {
    /// First item preferred.
    Win,
    /// Second item preferred.
    Lose,
    /// Annotator declared a tie.
    Tie,
}

/// Win/lose/tie probabilities for an ordered pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RkProbabilities {
    pub win: f64,
    pub lose: f64,
    pub tie: f64,
}

/// Rao-Kupper preference model with tie parameter ν ≥ 1.
///
/// The default orientation is the classical one: the win probability
/// increases with r_i − r_j. Some formulations write the exponent with the
/// opposite sign; [`RaoKupper::with_flipped_orientation`] swaps win/lose
/// accordingly. The tie probability — and therefore the sample weight — is
/// even in Δ and identical under both orientations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RaoKupper {
    nu: f64,
    flip_orientation: bool,
}

impl RaoKupper {
    pub fn new(nu: f64) -> Result<Self> {
        if !nu.is_finite() || nu < 1.0 {
            return Err(Error::InvalidArgument(format!(
                "tie parameter nu must be finite and >= 1, got {nu}"
            )));
        }
        Ok(Self {
            nu,
            flip_orientation: false,
        })
    }

    /// Same model with win/lose reported under the opposite sign convention.
    pub fn with_flipped_orientation(self) -> Self {
        Self {
            flip_orientation: !self.flip_orientation,
            ..self
        }
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    /// Tie probability as a function of the reward difference Δ.
    /// Exactly even: computed from e^{-|Δ|}.
    pub fn tie_probability(&self, delta: f64) -> f64 {
        let nu = self.nu;
        let x = (-delta.abs()).exp(); // in (0, 1]
        (nu * nu - 1.0) * x / ((1.0 + nu * x) * (nu + x))
    }

    /// Win/lose/tie probabilities for rewards (r_i, r_j).
    pub fn probabilities(&self, r_i: f64, r_j: f64) -> Result<RkProbabilities> {
        if !r_i.is_finite() || !r_j.is_finite() {
            return Err(Error::NonFinite(format!(
                "rewards must be finite, got ({r_i}, {r_j})"
            )));
        }
        let nu = self.nu;
        let delta = r_i - r_j;
        let mut win = 1.0 / (1.0 + nu * (-delta).exp());
        let mut lose = 1.0 / (1.0 + nu * delta.exp());
        if self.flip_orientation {
            std::mem::swap(&mut win, &mut lose);
        }
        let tie = self.tie_probability(delta);
        Ok(RkProbabilities { win, lose, tie })
    }

    /// Maps a uniform draw u ∈ [0, 1) to an outcome, with cumulative order
    /// win, lose, tie.
    pub fn sample_outcome(&self, r_i: f64, r_j: f64, u: f64) -> Result<PreferenceOutcome> {
        let p = self.probabilities(r_i, r_j)?;
        Ok(if u < p.win {
            PreferenceOutcome::Win
        } else if u < p.win + p.lose {
            PreferenceOutcome::Lose
        } else {
            PreferenceOutcome::Tie
        })
    }

    /// Training weight for a preference pair with implicit-reward margin m:
    /// `p_tie(m) + 2/(ν+1)`.
    ///
    /// At ν = 1 this is identically 1.0 (bit-exact), so weighted DPO
    /// degenerates to plain DPO.
    pub fn sample_weight(&self, margin: f64) -> Result<f64> {
        if !margin.is_finite() {
            return Err(Error::NonFinite(format!(
                "margin must be finite, got {margin}"
            )));
        }
        Ok(self.tie_probability(margin) + 2.0 / (self.nu + 1.0))
    }

    /// Floor of the sample weight: lim_{|m|→∞} w(m) = 2/(ν+1).
    pub fn weight_floor(&self) -> f64 {
        2.0 / (self.nu + 1.0)
    }
}

/// Implicit reward r̂ = β · (log π_θ(y|x) − log π_ref(y|x)).
pub fn implicit_reward(policy_log_prob: f64, reference_log_prob: f64, beta: f64) -> Result<f64> {
    if !(beta.is_finite() && beta > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "beta must be finite and > 0, got {beta}"
        )));
    }
    if !policy_log_prob.is_finite() || !reference_log_prob.is_finite() {
        return Err(Error::NonFinite(format!(
            "log-probabilities must be finite, got ({policy_log_prob}, {reference_log_prob})"
        )));
    }
    Ok(beta * (policy_log_prob - reference_log_prob))
}

/// Implicit rewards of a chosen/rejected pair; the margin drives both the
/// DPO loss and the Rao-Kupper sample weight. Carries the β it was computed
/// with so downstream consumers can sanity-check mixed-β bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImplicitRewardMargin {
    pub chosen: f64,
    pub rejected: f64,
    pub beta: f64,
}

impl ImplicitRewardMargin {
    pub fn from_log_probs(
        policy_chosen: f64,
        reference_chosen: f64,
        policy_rejected: f64,
        reference_rejected: f64,
        beta: f64,
    ) -> Result<Self> {
        Ok(Self {
            chosen: implicit_reward(policy_chosen, reference_chosen, beta)?,
            rejected: implicit_reward(policy_rejected, reference_rejected, beta)?,
            beta,
        })
    }

    pub fn margin(&self) -> f64 {
        self.chosen - self.rejected
    }
}

/// Margin-based difficulty classes for reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleKind {
    /// Confidently ordered the right way: margin ≥ m_easy.
    Easy,
    /// Confidently ordered the wrong way: margin ≤ m_hard.
    Hard,
    /// In between; these carry the largest Rao-Kupper weights.
    Boundary,
}

/// Default easy/hard thresholds on the implicit-reward margin.
pub const DEFAULT_M_EASY: f64 = 2.0;
pub const DEFAULT_M_HARD: f64 = -2.0;

/// A difficulty class together with the thresholds that produced it, so a
/// report row is self-describing even when thresholds vary between runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleCategory {
    pub kind: SampleKind,
    pub m_easy: f64,
    pub m_hard: f64,
}

/// Classifies a margin. Thresholds must straddle zero (m_hard < 0 < m_easy)
/// and both are inclusive: m ≥ m_easy is Easy, m ≤ m_hard is Hard.
pub fn categorize(margin: f64, m_easy: f64, m_hard: f64) -> Result<SampleCategory> {
    if !margin.is_finite() {
        return Err(Error::NonFinite(format!(
            "margin must be finite, got {margin}"
        )));
    }
    if !(m_hard.is_finite() && m_easy.is_finite() && m_hard < 0.0 && 0.0 < m_easy) {
        return Err(Error::InvalidArgument(format!(
            "thresholds must satisfy m_hard < 0 < m_easy, got m_hard={m_hard}, m_easy={m_easy}"
        )));
    }
    let kind = if margin >= m_easy {
        SampleKind::Easy
    } else if margin <= m_hard {
        SampleKind::Hard
    } else {
        SampleKind::Boundary
    };
    Ok(SampleCategory {
        kind,
        m_easy,
        m_hard,
    })
}
