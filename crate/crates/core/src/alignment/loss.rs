//! DPO losses and exact gradients for softmax policies.
//!
//! For a pair (y_w, y_l) with implicit rewards r̂ = β·log(π_θ/π_ref), the
//! plain loss is softplus(−m) with margin m = r̂_w − r̂_l; the weighted loss
//! multiplies by the Rao-Kupper sample weight w̄(m), which is treated as a
//! constant during differentiation (stop-gradient). An optional NLL term
//! −λ·log π_θ(y_w|x) regularizes toward the chosen response.
//!
//! Gradients are exact:
//!
//! ```text
//! ∇_W L_pair = −w̄·σ(−m)·β·(G_w − G_l) − λ·G_w,
//! G_y = Σ_t φ(x, y_{<t}) (e_{y_t} − p_t)ᵀ
//! ```
//!
//! Batch gradients are averaged with per-entry compensated summation, so
//! reordering a batch moves the result by less than 1e-12 relatively.

use ndarray::Array2;

use crate::math::{sigmoid, softplus, Kahan};
use crate::policy::{Policy, PromptId, Response};
use crate::preference::{ImplicitRewardMargin, RaoKupper};
use crate::{Error, Result};

/// An admitted preference pair: a clean chosen response and a hallucinated
/// rejected response for the same prompt, with their judge scores.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub prompt: PromptId,
    pub chosen: Response,
    pub rejected: Response,
    /// Judge score of the chosen response (must be < τ).
    pub p_chosen: f64,
    /// Judge score of the rejected response (must be ≥ τ).
    pub p_rejected: f64,
}

impl PreferencePair {
    /// Admission invariant: p_chosen < τ ≤ p_rejected, scores in [0, 1],
    /// both responses non-empty and distinct.
    pub fn validate(&self, tau: f64) -> Result<()> {
        if !(tau.is_finite() && tau > 0.0 && tau < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "tau must lie in (0, 1), got {tau}"
            )));
        }
        for (name, p) in [("p_chosen", self.p_chosen), ("p_rejected", self.p_rejected)] {
            if !(p.is_finite() && (0.0..=1.0).contains(&p)) {
                return Err(Error::InvalidArgument(format!(
                    "{name} must lie in [0, 1], got {p}"
                )));
            }
        }
        if !(self.p_chosen < tau && tau <= self.p_rejected) {
            return Err(Error::InvalidArgument(format!(
                "pair violates admission rule p_chosen < tau <= p_rejected: \
                 p_chosen={}, p_rejected={}, tau={tau}",
                self.p_chosen, self.p_rejected
            )));
        }
        if self.chosen.tokens.is_empty() || self.rejected.tokens.is_empty() {
            return Err(Error::InvalidArgument(
                "preference pair contains an empty response".into(),
            ));
        }
        if self.chosen.tokens == self.rejected.tokens {
            return Err(Error::InvalidArgument(
                "chosen and rejected responses are identical".into(),
            ));
        }
        Ok(())
    }
}

/// Loss weighting mode for a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Weighting {
    /// Plain DPO: every pair weighs 1.
    Plain,
    /// Rao-Kupper sample weights recomputed from the current margin.
    RaoKupper(RaoKupper),
}

/// Per-pair evaluation record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairStats {
    pub margin: f64,
    pub weight: f64,
    /// Total per-pair objective: weight·softplus(−margin) + λ·NLL(chosen).
    pub loss: f64,
}

/// Mean batch gradient plus per-pair records (in input order).
#[derive(Debug, Clone)]
pub struct BatchEval {
    pub grad: Array2<f64>,
    pub stats: Vec<PairStats>,
}

impl BatchEval {
    pub fn mean_loss(&self) -> f64 {
        crate::math::mean(&self.stats.iter().map(|s| s.loss).collect::<Vec<_>>())
    }

    pub fn mean_margin(&self) -> f64 {
        crate::math::mean(&self.stats.iter().map(|s| s.margin).collect::<Vec<_>>())
    }

    pub fn mean_weight(&self) -> f64 {
        crate::math::mean(&self.stats.iter().map(|s| s.weight).collect::<Vec<_>>())
    }
}

/// log π_θ(y|x) together with its exact weight-matrix gradient
/// G = Σ_t φ_t (e_{y_t} − p_t)ᵀ.
pub fn log_prob_and_gradient(
    policy: &Policy,
    prompt: PromptId,
    tokens: &[crate::policy::Token],
) -> Result<(f64, Array2<f64>)> {
    if tokens.is_empty() {
        return Err(Error::InvalidArgument(
            "response must contain at least one token".into(),
        ));
    }
    let mut grad = Array2::<f64>::zeros((policy.dim(), policy.vocab()));
    let mut log_prob = 0.0;
    for t in 0..tokens.len() {
        let ctx = &tokens[..t];
        let dist = policy.next_token_distribution(prompt, ctx)?;
        let target = tokens[t] as usize;
        if target >= policy.vocab() {
            return Err(Error::InvalidArgument(format!(
                "token id {target} out of range for vocabulary {}",
                policy.vocab()
            )));
        }
        log_prob += dist.probs()[target].ln();
        let phi = policy.feature_map().features(prompt, ctx);
        for i in 0..policy.dim() {
            let fi = phi[i];
            for k in 0..policy.vocab() {
                let delta = if k == target { 1.0 } else { 0.0 };
                grad[[i, k]] += fi * (delta - dist.probs()[k]);
            }
        }
    }
    Ok((log_prob, grad))
}

/// Loss/margin/weight of a single pair without gradient work. `nu = None`
/// gives the plain loss (weight 1).
pub fn pair_loss(
    policy: &Policy,
    reference: &Policy,
    pair: &PreferencePair,
    beta: f64,
    nu: Option<RaoKupper>,
) -> Result<PairStats> {
    policy.check_compatible(reference)?;
    let margin = pair_margin(policy, reference, pair, beta)?;
    let weight = match nu {
        None => 1.0,
        Some(rk) => rk.sample_weight(margin)?,
    };
    Ok(PairStats {
        margin,
        weight,
        loss: weight * softplus(-margin),
    })
}

fn pair_margin(
    policy: &Policy,
    reference: &Policy,
    pair: &PreferencePair,
    beta: f64,
) -> Result<f64> {
    let rewards = ImplicitRewardMargin::from_log_probs(
        policy.sequence_log_prob(pair.prompt, &pair.chosen.tokens)?,
        reference.sequence_log_prob(pair.prompt, &pair.chosen.tokens)?,
        policy.sequence_log_prob(pair.prompt, &pair.rejected.tokens)?,
        reference.sequence_log_prob(pair.prompt, &pair.rejected.tokens)?,
        beta,
    )?;
    Ok(rewards.margin())
}

/// Per-entry compensated matrix accumulator.
struct KahanMatrix {
    sum: Vec<Kahan>,
    rows: usize,
    cols: usize,
}

impl KahanMatrix {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            sum: vec![Kahan::new(); rows * cols],
            rows,
            cols,
        }
    }

    fn add_scaled(&mut self, m: &Array2<f64>, scale: f64) {
        debug_assert_eq!(m.nrows(), self.rows);
        debug_assert_eq!(m.ncols(), self.cols);
        for (acc, &v) in self.sum.iter_mut().zip(m.iter()) {
            acc.add(scale * v);
        }
    }

    fn into_array(self, scale: f64) -> Array2<f64> {
        Array2::from_shape_vec(
            (self.rows, self.cols),
            self.sum.into_iter().map(|k| scale * k.value()).collect(),
        )
        .expect("shape preserved")
    }
}

/// Evaluates a batch: mean objective gradient plus per-pair stats.
///
/// * `weighting` — plain or Rao-Kupper; weights are stop-gradient.
/// * `nll_weight` — λ ≥ 0 for the chosen-response NLL regularizer.
/// * `frozen_weights` — when `Some`, overrides per-pair weights (used by
///   the per-epoch weight-refresh mode); must align with `pairs`.
pub fn evaluate_batch(
    policy: &Policy,
    reference: &Policy,
    pairs: &[PreferencePair],
    beta: f64,
    weighting: Weighting,
    nll_weight: f64,
    frozen_weights: Option<&[f64]>,
) -> Result<BatchEval> {
    policy.check_compatible(reference)?;
    if pairs.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot evaluate an empty batch".into(),
        ));
    }
    if !(nll_weight.is_finite() && nll_weight >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "nll weight must be finite and >= 0, got {nll_weight}"
        )));
    }
    if let Some(fw) = frozen_weights {
        if fw.len() != pairs.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} frozen weights for {} pairs",
                fw.len(),
                pairs.len()
            )));
        }
        for &w in fw {
            if !(w.is_finite() && w > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "frozen weight must be finite and > 0, got {w}"
                )));
            }
        }
    }

    let mut acc = KahanMatrix::zeros(policy.dim(), policy.vocab());
    let mut stats = Vec::with_capacity(pairs.len());
    for (ix, pair) in pairs.iter().enumerate() {
        let (lp_w, g_w) = log_prob_and_gradient(policy, pair.prompt, &pair.chosen.tokens)?;
        let (lp_l, g_l) = log_prob_and_gradient(policy, pair.prompt, &pair.rejected.tokens)?;
        let ref_w = reference.sequence_log_prob(pair.prompt, &pair.chosen.tokens)?;
        let ref_l = reference.sequence_log_prob(pair.prompt, &pair.rejected.tokens)?;
        let rewards = ImplicitRewardMargin::from_log_probs(lp_w, ref_w, lp_l, ref_l, beta)?;
        let margin = rewards.margin();
        let weight = match frozen_weights {
            Some(fw) => fw[ix],
            None => match weighting {
                Weighting::Plain => 1.0,
                Weighting::RaoKupper(rk) => rk.sample_weight(margin)?,
            },
        };
        let loss = weight * softplus(-margin) + nll_weight * (-lp_w);
        // ∂L/∂W = −w̄·σ(−m)·β·(G_w − G_l) − λ·G_w
        let scale = weight * sigmoid(-margin) * beta;
        acc.add_scaled(&g_w, -scale - nll_weight);
        acc.add_scaled(&g_l, scale);
        stats.push(PairStats {
            margin,
            weight,
            loss,
        });
    }
    Ok(BatchEval {
        grad: acc.into_array(1.0 / pairs.len() as f64),
        stats,
    })
}
