//! Probability-space training dynamics.
//!
//! This module studies, in a controlled single-distribution setting, how
//! gradient training moves probability mass between a dominant
//! "hallucinated" token h and the clean tokens c it competes with:
//!
//! * [`euler_step`] integrates the softmax cross-entropy ODE directly in
//!   probability space; [`run_offpolicy_trajectory`] iterates it toward an
//!   external target and audits the gap d_c(n) = p_h − p_c at every step.
//!   The audited facts: the ordering p_h ≥ p_c persists and
//!   p_h ≥ ‖p‖² − p_y holds throughout, while the gaps themselves contract
//!   toward zero (every contraction event is counted and reported).
//! * [`run_onpolicy_contrast`] trains the same initial policy two ways —
//!   fresh on-policy single-token pairs vs. one fixed off-policy
//!   ground-truth pair — and records whether the modal token flips to a
//!   clean one.
//! * [`support_suppression_probe`] measures how the generation probability
//!   of a chosen response moves under preference training when the
//!   response starts inside, barely inside, or structurally outside the
//!   sampler's support.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::Serialize;

use crate::alignment::{evaluate_batch, PreferencePair, Weighting};
use crate::math::kahan_sum;
use crate::policy::{eos_token, FeatureMap, Policy, PromptId, Response, Token, TokenDistribution};
use crate::seeds;
use crate::{Error, Result};

/// Default Euler step size Δt·β.
pub const DEFAULT_STEP: f64 = 0.05;
/// Per-step tolerance for the gap and lower-bound audits.
pub const GAP_TOLERANCE: f64 = 1e-12;

/// Feature dimension used by simulator-constructed policies.
const SIM_DIM: usize = 16;

// ---------------------------------------------------------------------------
// Euler integration of the cross-entropy ODE
// ---------------------------------------------------------------------------

/// One Euler step of the softmax cross-entropy dynamics toward target `y`:
///
/// p'_k = p_k − step · p_k · [(p_k − δ_{ky}) − f],   f = ‖p‖² − p_y.
///
/// The update's components sum to zero analytically, so the simplex is
/// preserved up to rounding; no renormalization is applied. Errors with
/// [`Error::StepSizeViolation`] if any updated entry leaves (0, 1).
pub fn euler_step(p: &[f64], target: usize, step: f64) -> Result<Vec<f64>> {
    euler_step_indexed(p, target, step, 0)
}

fn euler_step_indexed(p: &[f64], y: usize, step: f64, index: usize) -> Result<Vec<f64>> {
    if p.len() < 2 {
        return Err(Error::InvalidArgument(
            "distribution needs at least two entries".into(),
        ));
    }
    if y >= p.len() {
        return Err(Error::InvalidArgument(format!(
            "target {y} out of range for {} tokens",
            p.len()
        )));
    }
    if !(step.is_finite() && step > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "step size must be finite and > 0, got {step}"
        )));
    }
    let norm_sq: f64 = p.iter().map(|v| v * v).sum();
    let f = norm_sq - p[y];
    let mut out = Vec::with_capacity(p.len());
    for (k, &pk) in p.iter().enumerate() {
        let delta = if k == y { 1.0 } else { 0.0 };
        let next = pk - step * pk * ((pk - delta) - f);
        if !(next > 0.0 && next < 1.0) {
            return Err(Error::StepSizeViolation {
                step: index,
                token: k,
                value: next,
            });
        }
        out.push(next);
    }
    Ok(out)
}

/// One exact weight-space descent step on the next-token cross-entropy
/// objective (thin wrapper over [`Policy::cross_entropy_step`], provided so
/// probability-space and weight-space trajectories can be compared).
/// Accepts η = 0 as the identity.
pub fn weight_space_step(
    policy: &Policy,
    prompt: PromptId,
    context: &[Token],
    target: Token,
    eta: f64,
) -> Result<Policy> {
    if eta == 0.0 {
        return Ok(policy.clone());
    }
    policy.cross_entropy_step(prompt, context, target, eta)
}

/// Builds a context-free policy (feature window 0, so every position
/// shares one feature vector) whose next-token distribution equals `p` up
/// to rounding: W[d, k] = φ[d] · ln p_k with a unit-norm feature vector.
/// Sequences under such a policy are i.i.d. draws from one distribution,
/// which is exactly the simulator's single-distribution setting.
pub fn policy_from_distribution(p: &[f64], feature_seed: u64) -> Result<Policy> {
    let dist = TokenDistribution::new(p.to_vec())?;
    let vocab = dist.len();
    let features = FeatureMap::new(SIM_DIM, 0, feature_seed)?;
    let phi = features.features(0, &[]);
    let mut weights = Array2::zeros((SIM_DIM, vocab));
    for d in 0..SIM_DIM {
        for (k, &pk) in p.iter().enumerate() {
            weights[[d, k]] = phi[d] * pk.ln();
        }
    }
    Policy::from_weights(vocab, 0, feature_seed, weights)
}

/// Uniform (Dirichlet-1) random point on the open simplex.
pub fn random_simplex(vocab: usize, seed: u64) -> Result<Vec<f64>> {
    if vocab < 2 {
        return Err(Error::InvalidArgument(
            "simplex draw needs at least two tokens".into(),
        ));
    }
    let mut rng = seeds::rng(seeds::derive(seed, "dynamics-init"));
    let draws: Vec<f64> = (0..vocab)
        .map(|_| {
            let e: f64 = Exp1.sample(&mut rng);
            e.max(f64::MIN_POSITIVE)
        })
        .collect();
    let total = kahan_sum(&draws);
    Ok(draws.into_iter().map(|e| e / total).collect())
}

/// Random simplex point whose largest entry sits at `modal` (the draw's
/// argmax is swapped into position). Used to build ensembles that satisfy
/// the "initial modal token is hallucinated" precondition by construction.
pub fn random_simplex_with_modal(vocab: usize, modal: Token, seed: u64) -> Result<Vec<f64>> {
    if (modal as usize) >= vocab {
        return Err(Error::InvalidArgument(format!(
            "modal token {modal} out of range for {vocab} tokens"
        )));
    }
    let mut p = random_simplex(vocab, seed)?;
    let argmax = TokenDistribution::new(p.clone())?.argmax() as usize;
    p.swap(argmax, modal as usize);
    Ok(p)
}

// ---------------------------------------------------------------------------
// Off-policy trajectories and the gap audit
// ---------------------------------------------------------------------------

/// How a trajectory is integrated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DynamicsMode {
    /// Euler steps directly on the probability vector.
    EulerProbabilitySpace,
    /// Exact gradient descent on an equivalent softmax policy's weights,
    /// reading the distribution back after each step.
    GradientWeightSpace,
}

impl DynamicsMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            DynamicsMode::EulerProbabilitySpace => "euler_probability_space",
            DynamicsMode::GradientWeightSpace => "gradient_weight_space",
        }
    }
}

/// Where the initial distribution comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum InitialDistribution {
    /// Seeded uniform draw from the simplex.
    Random,
    /// Explicit probability vector (validated at run start).
    Explicit(Vec<f64>),
}

/// Configuration of one off-policy trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicsConfig {
    pub vocab: usize,
    pub init: InitialDistribution,
    /// Sorted, strictly ascending hallucinated token set.
    pub halluc_set: Vec<Token>,
    /// Euler step Δt·β (also the weight-space learning rate).
    pub step: f64,
    pub steps: usize,
    pub mode: DynamicsMode,
    pub seed: u64,
    /// Clean tokens whose gap to h is audited; None tracks every clean
    /// token other than the target.
    pub tracked: Option<Vec<Token>>,
}

impl DynamicsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(Error::InvalidArgument("vocab must be >= 2".into()));
        }
        if self.halluc_set.is_empty() {
            return Err(Error::InvalidArgument(
                "hallucinated set must be non-empty".into(),
            ));
        }
        if !self.halluc_set.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::InvalidArgument(
                "hallucinated set must be sorted and strictly ascending".into(),
            ));
        }
        if self.halluc_set.last().map(|&t| t as usize >= self.vocab) == Some(true) {
            return Err(Error::InvalidArgument(
                "hallucinated set contains a token outside the vocabulary".into(),
            ));
        }
        if self.halluc_set.len() >= self.vocab {
            return Err(Error::InvalidArgument(
                "at least one clean token is required".into(),
            ));
        }
        if !(self.step.is_finite() && self.step > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "step size must be finite and > 0, got {}",
                self.step
            )));
        }
        if self.steps == 0 {
            return Err(Error::InvalidArgument("steps must be >= 1".into()));
        }
        if let InitialDistribution::Explicit(p) = &self.init {
            if p.len() != self.vocab {
                return Err(Error::InvalidArgument(format!(
                    "explicit distribution has {} entries for vocab {}",
                    p.len(),
                    self.vocab
                )));
            }
            TokenDistribution::new(p.clone())?;
        }
        Ok(())
    }

    fn resolve_initial(&self) -> Result<Vec<f64>> {
        match &self.init {
            InitialDistribution::Random => random_simplex(self.vocab, self.seed),
            InitialDistribution::Explicit(p) => Ok(p.clone()),
        }
    }
}

/// One audited state of a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub step: usize,
    pub p: Vec<f64>,
    /// Gaps p_h − p_c aligned with the run's tracked token list.
    pub gaps: Vec<f64>,
}

/// A full off-policy run with its audit counters.
#[derive(Debug, Clone, PartialEq)]
pub struct OffpolicyRun {
    /// Dominant hallucinated token at initialization (the global argmax).
    pub h: Token,
    /// External training target.
    pub y: Token,
    /// Audited clean tokens (excludes y and the hallucinated set).
    pub tracked: Vec<Token>,
    /// States 0..=steps.
    pub records: Vec<TrajectoryRecord>,
    /// (c, n) events with p_h(n) − p_c(n) < −1e-12: h lost its dominance
    /// over a tracked token.
    pub ordering_violations: usize,
    /// (c, n) events with d_c(n+1) < d_c(n) − 1e-12. Gaps contract under
    /// these dynamics, so this counter is expected to be large; it is
    /// reported, not asserted against.
    pub gap_decrease_steps: usize,
    /// Largest single-step gap contraction observed.
    pub max_gap_decrease: f64,
    /// States with p_h < ‖p‖² − p_y − 1e-12.
    pub lower_bound_violations: usize,
    /// max |Σ_k p_k − 1| over all states.
    pub simplex_drift: f64,
}

/// Serializable one-line summary of an off-policy run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OffpolicySummary {
    pub seed: u64,
    pub vocab: usize,
    pub mode: String,
    pub h: Token,
    pub y: Token,
    pub steps: usize,
    pub ordering_violations: usize,
    pub gap_decrease_steps: usize,
    pub max_gap_decrease: f64,
    pub lower_bound_violations: usize,
    pub simplex_drift: f64,
    pub final_p: Vec<f64>,
}

impl OffpolicyRun {
    pub fn summary(&self, config: &DynamicsConfig) -> OffpolicySummary {
        OffpolicySummary {
            seed: config.seed,
            vocab: config.vocab,
            mode: config.mode.as_str().into(),
            h: self.h,
            y: self.y,
            steps: self.records.len() - 1,
            ordering_violations: self.ordering_violations,
            gap_decrease_steps: self.gap_decrease_steps,
            max_gap_decrease: self.max_gap_decrease,
            lower_bound_violations: self.lower_bound_violations,
            simplex_drift: self.simplex_drift,
            final_p: self
                .records
                .last()
                .expect("runs have a final state")
                .p
                .clone(),
        }
    }
}

/// Plot-ready CSV: `step,p_0..p_{V-1},d_<c>...` with one gap column per
/// tracked token.
pub fn trajectory_csv(run: &OffpolicyRun) -> String {
    let vocab = run.records.first().map(|r| r.p.len()).unwrap_or(0);
    let mut s = String::from("step");
    for k in 0..vocab {
        s.push_str(&format!(",p_{k}"));
    }
    for c in &run.tracked {
        s.push_str(&format!(",d_{c}"));
    }
    s.push('\n');
    for r in &run.records {
        s.push_str(&r.step.to_string());
        for v in &r.p {
            s.push_str(&format!(",{v}"));
        }
        for g in &r.gaps {
            s.push_str(&format!(",{g}"));
        }
        s.push('\n');
    }
    s
}

struct GapAudit {
    h: usize,
    y: usize,
    tracked: Vec<Token>,
    ordering_violations: usize,
    gap_decrease_steps: usize,
    max_gap_decrease: f64,
    lower_bound_violations: usize,
    simplex_drift: f64,
}

impl GapAudit {
    fn gaps(&self, p: &[f64]) -> Vec<f64> {
        self.tracked
            .iter()
            .map(|&c| p[self.h] - p[c as usize])
            .collect()
    }

    fn audit_state(&mut self, p: &[f64], gaps: &[f64]) {
        for &d in gaps {
            if d < -GAP_TOLERANCE {
                self.ordering_violations += 1;
            }
        }
        let norm_sq: f64 = p.iter().map(|v| v * v).sum();
        if p[self.h] < norm_sq - p[self.y] - GAP_TOLERANCE {
            self.lower_bound_violations += 1;
        }
        let drift = (kahan_sum(p) - 1.0).abs();
        if drift > self.simplex_drift {
            self.simplex_drift = drift;
        }
    }

    fn audit_transition(&mut self, before: &[f64], after: &[f64]) {
        for (&b, &a) in before.iter().zip(after) {
            if a < b - GAP_TOLERANCE {
                self.gap_decrease_steps += 1;
                let contraction = b - a;
                if contraction > self.max_gap_decrease {
                    self.max_gap_decrease = contraction;
                }
            }
        }
    }
}

/// Integrates a trajectory toward the external target `y` (which must be
/// clean) and audits the hallucinated-vs-clean gaps at every step.
///
/// Preconditions: the initial global argmax must lie in the hallucinated
/// set, and y must not.
pub fn run_offpolicy_trajectory(config: &DynamicsConfig, y: Token) -> Result<OffpolicyRun> {
    config.validate()?;
    if (y as usize) >= config.vocab {
        return Err(Error::InvalidArgument(format!(
            "target {y} out of range for vocab {}",
            config.vocab
        )));
    }
    if config.halluc_set.binary_search(&y).is_ok() {
        return Err(Error::InvalidArgument(format!(
            "target {y} must be a clean token"
        )));
    }
    let p0 = config.resolve_initial()?;
    TokenDistribution::new(p0.clone())?;
    let h = TokenDistribution::new(p0.clone())?.argmax();
    if config.halluc_set.binary_search(&h).is_err() {
        return Err(Error::InvalidArgument(format!(
            "initial modal token {h} is not in the hallucinated set"
        )));
    }

    let tracked: Vec<Token> = match &config.tracked {
        Some(list) => {
            for &c in list {
                if (c as usize) >= config.vocab
                    || c == y
                    || config.halluc_set.binary_search(&c).is_ok()
                {
                    return Err(Error::InvalidArgument(format!(
                        "tracked token {c} must be clean and differ from the target"
                    )));
                }
            }
            list.clone()
        }
        None => (0..config.vocab as Token)
            .filter(|&c| c != y && config.halluc_set.binary_search(&c).is_err())
            .collect(),
    };

    let mut audit = GapAudit {
        h: h as usize,
        y: y as usize,
        tracked,
        ordering_violations: 0,
        gap_decrease_steps: 0,
        max_gap_decrease: 0.0,
        lower_bound_violations: 0,
        simplex_drift: 0.0,
    };

    let mut weight_policy = match config.mode {
        DynamicsMode::EulerProbabilitySpace => None,
        DynamicsMode::GradientWeightSpace => Some(policy_from_distribution(
            &p0,
            seeds::derive(config.seed, "dynamics-weightspace"),
        )?),
    };

    let mut p = p0;
    let mut gaps = audit.gaps(&p);
    audit.audit_state(&p, &gaps);
    let mut records = vec![TrajectoryRecord {
        step: 0,
        p: p.clone(),
        gaps: gaps.clone(),
    }];

    for n in 0..config.steps {
        let next = match &mut weight_policy {
            None => euler_step_indexed(&p, y as usize, config.step, n)?,
            Some(policy) => {
                *policy = policy.cross_entropy_step(0, &[], y, config.step)?;
                policy.next_token_distribution(0, &[])?.probs().to_vec()
            }
        };
        let next_gaps = audit.gaps(&next);
        audit.audit_transition(&gaps, &next_gaps);
        audit.audit_state(&next, &next_gaps);
        p = next;
        gaps = next_gaps;
        records.push(TrajectoryRecord {
            step: n + 1,
            p: p.clone(),
            gaps: gaps.clone(),
        });
    }

    Ok(OffpolicyRun {
        h,
        y,
        tracked: audit.tracked,
        records,
        ordering_violations: audit.ordering_violations,
        gap_decrease_steps: audit.gap_decrease_steps,
        max_gap_decrease: audit.max_gap_decrease,
        lower_bound_violations: audit.lower_bound_violations,
        simplex_drift: audit.simplex_drift,
    })
}

// ---------------------------------------------------------------------------
// On-policy vs. off-policy contrast
// ---------------------------------------------------------------------------

/// Contrast experiment parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastConfig {
    pub beta: f64,
    pub eta: f64,
    pub steps: usize,
    /// Sampling attempts per side per step in the on-policy arm.
    pub sample_retries: usize,
    pub seed: u64,
}

impl ContrastConfig {
    /// The documented demonstration settings.
    pub fn standard(seed: u64) -> Self {
        Self {
            beta: 0.1,
            eta: 0.1,
            steps: 500,
            sample_retries: 32,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "beta must be finite and > 0, got {}",
                self.beta
            )));
        }
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "eta must be finite and > 0, got {}",
                self.eta
            )));
        }
        if self.steps == 0 || self.sample_retries == 0 {
            return Err(Error::InvalidArgument(
                "steps and sample_retries must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// One trained arm of the contrast.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastArm {
    pub label: &'static str,
    /// Next-token distribution at the tracked context, states 0..=steps.
    pub trajectory: Vec<Vec<f64>>,
    /// True iff the modal token was clean at any recorded state.
    pub flipped: bool,
    pub first_flip_step: Option<usize>,
    /// Steps skipped because sampling found no usable pair.
    pub sampling_failures: usize,
    /// True iff p_h ≥ p_c for every clean token c in the final state.
    pub h_dominates_correctives: bool,
}

impl ContrastArm {
    pub fn initial(&self) -> &[f64] {
        self.trajectory
            .first()
            .expect("arms record the initial state")
    }

    pub fn final_dist(&self) -> &[f64] {
        self.trajectory.last().expect("arms record the final state")
    }
}

/// Both arms plus the shared setup facts.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastReport {
    pub vocab: usize,
    pub halluc_set: Vec<Token>,
    /// Dominant hallucinated token at initialization.
    pub h: Token,
    /// Fixed ground-truth sequence trained on by the off-policy arm.
    pub gt_sequence: Vec<Token>,
    /// Fixed hallucinated sequence rejected by the off-policy arm.
    pub rejected_sequence: Vec<Token>,
    pub on_policy: ContrastArm,
    pub off_policy: ContrastArm,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContrastArmSummary {
    pub label: String,
    pub flipped: bool,
    pub first_flip_step: Option<usize>,
    pub sampling_failures: usize,
    pub h_dominates_correctives: bool,
    pub final_p: Vec<f64>,
}

/// Serializable one-line summary of a contrast run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContrastSummary {
    pub seed: u64,
    pub vocab: usize,
    pub h: Token,
    pub halluc_set: Vec<Token>,
    pub on_policy: ContrastArmSummary,
    pub off_policy: ContrastArmSummary,
}

impl ContrastReport {
    pub fn summary(&self, seed: u64) -> ContrastSummary {
        let arm = |a: &ContrastArm| ContrastArmSummary {
            label: a.label.into(),
            flipped: a.flipped,
            first_flip_step: a.first_flip_step,
            sampling_failures: a.sampling_failures,
            h_dominates_correctives: a.h_dominates_correctives,
            final_p: a.final_dist().to_vec(),
        };
        ContrastSummary {
            seed,
            vocab: self.vocab,
            h: self.h,
            halluc_set: self.halluc_set.clone(),
            on_policy: arm(&self.on_policy),
            off_policy: arm(&self.off_policy),
        }
    }
}

/// Plot-ready CSV for both arms: `arm,step,p_0..p_{V-1}`.
pub fn contrast_csv(report: &ContrastReport) -> String {
    let mut s = String::from("arm,step");
    for k in 0..report.vocab {
        s.push_str(&format!(",p_{k}"));
    }
    s.push('\n');
    for arm in [&report.on_policy, &report.off_policy] {
        for (step, p) in arm.trajectory.iter().enumerate() {
            s.push_str(arm.label);
            s.push_str(&format!(",{step}"));
            for v in p {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
    }
    s
}

/// Everything needed to run the standard contrast demonstration: a
/// 40-token policy whose initial next-token distribution puts 0.5 on the
/// dominant hallucinated token and 0.2 on the leading clean token, plus
/// fixed ground-truth/rejected sequences for the off-policy arm.
pub struct ContrastSetup {
    pub policy: Policy,
    pub prompt: PromptId,
    pub halluc_set: Vec<Token>,
    pub gt_sequence: Vec<Token>,
    pub rejected_sequence: Vec<Token>,
}

/// Builds the documented contrast setup. The initial distribution is
/// explicit: token 3 (hallucinated) at 0.5, tokens 7 and 11 (hallucinated)
/// at 0.02, token 12 (clean leader) at 0.2, all other tokens sharing the
/// remainder uniformly. The ground-truth and rejected sequences are long
/// (40 tokens) and draw from disjoint token pools, so the off-policy
/// margin saturates quickly and the per-token logit budget stays below the
/// 0.92-nat gap between the dominant hallucinated token and the clean
/// leader.
pub fn contrast_setup(seed: u64) -> Result<ContrastSetup> {
    const VOCAB: usize = 120;
    const SEQ_LEN: usize = 40;
    let halluc_set: Vec<Token> = vec![3, 7, 11];
    let leader: Token = 12;

    let special = 0.5 + 0.02 + 0.02 + 0.2;
    let rest = (1.0 - special) / (VOCAB - 4) as f64;
    let mut p = vec![rest; VOCAB];
    p[3] = 0.5;
    p[7] = 0.02;
    p[11] = 0.02;
    p[leader as usize] = 0.2;
    // Normalize exactly enough for the strict distribution validator.
    let total = kahan_sum(&p);
    for v in &mut p {
        *v /= total;
    }

    let policy = policy_from_distribution(&p, seeds::derive(seed, "contrast-features"))?;

    // Chosen: 40 distinct clean tokens (13..=52). Rejected: the three
    // hallucinated tokens followed by 37 distinct clean tokens disjoint
    // from the chosen pool (53..=89).
    let gt_sequence: Vec<Token> = (13..13 + SEQ_LEN as Token).collect();
    let mut rejected_sequence: Vec<Token> = halluc_set.clone();
    rejected_sequence.extend(53..53 + (SEQ_LEN - halluc_set.len()) as Token);

    Ok(ContrastSetup {
        policy,
        prompt: 0,
        halluc_set,
        gt_sequence,
        rejected_sequence,
    })
}

fn single_pair(
    reference: &Policy,
    prompt: PromptId,
    chosen: Vec<Token>,
    rejected: Vec<Token>,
) -> Result<PreferencePair> {
    let chosen_lp = reference.sequence_log_prob(prompt, &chosen)?;
    let rejected_lp = reference.sequence_log_prob(prompt, &rejected)?;
    Ok(PreferencePair {
        prompt,
        chosen: Response {
            tokens: chosen,
            log_prob: chosen_lp,
        },
        rejected: Response {
            tokens: rejected,
            log_prob: rejected_lp,
        },
        p_chosen: 0.0,
        p_rejected: 1.0,
    })
}

fn dpo_step(
    policy: &mut Policy,
    reference: &Policy,
    pair: &PreferencePair,
    beta: f64,
    eta: f64,
) -> Result<()> {
    let pairs = std::slice::from_ref(pair);
    let eval = evaluate_batch(policy, reference, pairs, beta, Weighting::Plain, 0.0, None)?;
    policy.apply_update(&eval.grad.mapv(|g| -eta * g))
}

/// Runs the two-arm contrast from one initial policy. The on-policy arm
/// trains each step on a freshly sampled single-token pair (chosen = first
/// clean draw, rejected = first hallucinated draw, exact-membership
/// labels); a step with no usable pair is skipped and counted. The
/// off-policy arm trains every step on the fixed
/// (ground-truth, hallucinated) sequence pair.
pub fn run_onpolicy_contrast(
    policy: &Policy,
    prompt: PromptId,
    halluc_set: &[Token],
    gt_sequence: &[Token],
    rejected_sequence: &[Token],
    cfg: &ContrastConfig,
) -> Result<ContrastReport> {
    cfg.validate()?;
    if halluc_set.is_empty() || !halluc_set.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::InvalidArgument(
            "hallucinated set must be non-empty, sorted and strictly ascending".into(),
        ));
    }
    if halluc_set.last().map(|&t| t as usize >= policy.vocab()) == Some(true) {
        return Err(Error::InvalidArgument(
            "hallucinated set contains a token outside the vocabulary".into(),
        ));
    }
    if gt_sequence.is_empty() || rejected_sequence.is_empty() {
        return Err(Error::InvalidArgument(
            "contrast sequences must be non-empty".into(),
        ));
    }
    if gt_sequence
        .iter()
        .any(|t| halluc_set.binary_search(t).is_ok())
    {
        return Err(Error::InvalidArgument(
            "ground-truth sequence contains a hallucinated token".into(),
        ));
    }
    if gt_sequence == rejected_sequence {
        return Err(Error::InvalidArgument(
            "chosen and rejected sequences are identical".into(),
        ));
    }

    let vocab = policy.vocab();
    let initial = policy.next_token_distribution(prompt, &[])?;
    let h = {
        // Dominant hallucinated token; the precondition for a meaningful
        // run (checked by callers that care) is that it is also the global
        // argmax.
        let mut best: Option<Token> = None;
        for &t in halluc_set {
            if best.is_none_or(|b| initial.probs()[t as usize] > initial.probs()[b as usize]) {
                best = Some(t);
            }
        }
        best.expect("hallucinated set is non-empty")
    };

    let is_clean = |t: Token| halluc_set.binary_search(&t).is_err();
    let flip_state = |p: &[f64]| {
        let mut arg = 0usize;
        for (i, &v) in p.iter().enumerate() {
            if v > p[arg] {
                arg = i;
            }
        }
        is_clean(arg as Token)
    };
    let dominates = |p: &[f64]| {
        (0..vocab as Token)
            .filter(|&c| is_clean(c))
            .all(|c| p[h as usize] >= p[c as usize])
    };

    // --- On-policy arm ---
    let reference = policy.clone();
    let mut current = policy.clone();
    let mut trajectory = vec![initial.probs().to_vec()];
    let mut first_flip_step = if flip_state(&trajectory[0]) {
        Some(0)
    } else {
        None
    };
    let mut sampling_failures = 0usize;
    for n in 1..=cfg.steps {
        let dist = current.next_token_distribution(prompt, &[])?;
        let mut rng = seeds::rng(seeds::derive_indexed(
            cfg.seed,
            "contrast-onpolicy",
            &[n as u64],
        ));
        let mut clean_draw: Option<Token> = None;
        let mut halluc_draw: Option<Token> = None;
        for _ in 0..cfg.sample_retries {
            let t = dist.sample_with(rng.random::<f64>());
            if is_clean(t) {
                clean_draw.get_or_insert(t);
            } else {
                halluc_draw.get_or_insert(t);
            }
            if clean_draw.is_some() && halluc_draw.is_some() {
                break;
            }
        }
        match (clean_draw, halluc_draw) {
            (Some(c), Some(r)) => {
                let pair = single_pair(&reference, prompt, vec![c], vec![r])?;
                dpo_step(&mut current, &reference, &pair, cfg.beta, cfg.eta)?;
            }
            _ => sampling_failures += 1,
        }
        let p = current
            .next_token_distribution(prompt, &[])?
            .probs()
            .to_vec();
        if first_flip_step.is_none() && flip_state(&p) {
            first_flip_step = Some(n);
        }
        trajectory.push(p);
    }
    let on_policy = ContrastArm {
        label: "on_policy",
        flipped: first_flip_step.is_some(),
        first_flip_step,
        sampling_failures,
        h_dominates_correctives: dominates(trajectory.last().expect("non-empty")),
        trajectory,
    };

    // --- Off-policy arm ---
    let mut current = policy.clone();
    let mut trajectory = vec![initial.probs().to_vec()];
    let mut first_flip_step = if flip_state(&trajectory[0]) {
        Some(0)
    } else {
        None
    };
    let pair = single_pair(
        &reference,
        prompt,
        gt_sequence.to_vec(),
        rejected_sequence.to_vec(),
    )?;
    for n in 1..=cfg.steps {
        dpo_step(&mut current, &reference, &pair, cfg.beta, cfg.eta)?;
        let p = current
            .next_token_distribution(prompt, &[])?
            .probs()
            .to_vec();
        if first_flip_step.is_none() && flip_state(&p) {
            first_flip_step = Some(n);
        }
        trajectory.push(p);
    }
    let off_policy = ContrastArm {
        label: "off_policy_gt",
        flipped: first_flip_step.is_some(),
        first_flip_step,
        sampling_failures: 0,
        h_dominates_correctives: dominates(trajectory.last().expect("non-empty")),
        trajectory,
    };

    Ok(ContrastReport {
        vocab,
        halluc_set: halluc_set.to_vec(),
        h,
        gt_sequence: gt_sequence.to_vec(),
        rejected_sequence: rejected_sequence.to_vec(),
        on_policy,
        off_policy,
    })
}

// ---------------------------------------------------------------------------
// Support-suppression probe
// ---------------------------------------------------------------------------

/// True iff the sampler could emit exactly `tokens`: non-empty, within the
/// length budget, no end-token before the last position, and terminated
/// (ends with the end-token or fills the budget).
pub fn is_generable(tokens: &[Token], eos: Token, max_len: usize) -> bool {
    if tokens.is_empty() || tokens.len() > max_len {
        return false;
    }
    if tokens[..tokens.len() - 1].contains(&eos) {
        return false;
    }
    tokens.len() == max_len || *tokens.last().expect("non-empty") == eos
}

/// Probability that ancestral sampling emits exactly `tokens`:
/// exp(sequence log-probability) when the sequence is generable, exactly 0
/// otherwise. A response can carry positive likelihood yet zero generation
/// probability (e.g. tokens after the end-token).
pub fn generation_probability(
    policy: &Policy,
    prompt: PromptId,
    tokens: &[Token],
    max_len: usize,
) -> Result<f64> {
    let log_prob = policy.sequence_log_prob(prompt, tokens)?;
    if is_generable(tokens, eos_token(policy.vocab()), max_len) {
        Ok(log_prob.exp())
    } else {
        Ok(0.0)
    }
}

/// One probe arm: a fixed preference pair trained in isolation.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeArm {
    pub label: String,
    pub chosen: Vec<Token>,
    pub rejected: Vec<Token>,
}

/// Probe parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportProbeConfig {
    pub beta: f64,
    pub eta: f64,
    pub steps: usize,
    /// "Remains negligible" ceiling for low-support chosen responses.
    pub ceiling: f64,
    pub max_len: usize,
}

impl SupportProbeConfig {
    /// The documented probe settings.
    pub fn standard() -> Self {
        Self {
            beta: 0.1,
            eta: 0.1,
            steps: 500,
            ceiling: 1e-3,
            max_len: 8,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > 0.0) || !(self.eta.is_finite() && self.eta > 0.0)
        {
            return Err(Error::InvalidArgument(
                "beta and eta must be finite and > 0".into(),
            ));
        }
        if self.steps == 0 || self.max_len == 0 {
            return Err(Error::InvalidArgument(
                "steps and max_len must be >= 1".into(),
            ));
        }
        if !(self.ceiling.is_finite() && self.ceiling > 0.0) {
            return Err(Error::InvalidArgument(
                "ceiling must be finite and > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Before/after measurements for one arm.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeArmReport {
    pub label: String,
    pub chosen: Vec<Token>,
    pub generable: bool,
    /// Generation probability of the chosen response under the reference.
    pub p_before: f64,
    /// Generation probability under the trained policy.
    pub p_after: f64,
    pub log_prob_before: f64,
    pub log_prob_after: f64,
}

/// All probe arms plus the ceiling they are judged against.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SupportProbeReport {
    pub ceiling: f64,
    pub steps: usize,
    pub arms: Vec<ProbeArmReport>,
}

/// Trains each arm's pair in isolation (plain preference loss, frozen
/// reference) and reports the chosen response's generation probability
/// before and after.
pub fn support_suppression_probe(
    reference: &Policy,
    prompt: PromptId,
    arms: &[ProbeArm],
    cfg: &SupportProbeConfig,
) -> Result<SupportProbeReport> {
    cfg.validate()?;
    if arms.is_empty() {
        return Err(Error::InvalidArgument(
            "probe needs at least one arm".into(),
        ));
    }
    let eos = eos_token(reference.vocab());
    let mut reports = Vec::with_capacity(arms.len());
    for arm in arms {
        if arm.chosen == arm.rejected {
            return Err(Error::InvalidArgument(format!(
                "arm {}: chosen and rejected are identical",
                arm.label
            )));
        }
        let pair = single_pair(reference, prompt, arm.chosen.clone(), arm.rejected.clone())?;
        let mut policy = reference.clone();
        for _ in 0..cfg.steps {
            dpo_step(&mut policy, reference, &pair, cfg.beta, cfg.eta)?;
        }
        reports.push(ProbeArmReport {
            label: arm.label.clone(),
            chosen: arm.chosen.clone(),
            generable: is_generable(&arm.chosen, eos, cfg.max_len),
            p_before: generation_probability(reference, prompt, &arm.chosen, cfg.max_len)?,
            p_after: generation_probability(&policy, prompt, &arm.chosen, cfg.max_len)?,
            log_prob_before: reference.sequence_log_prob(prompt, &arm.chosen)?,
            log_prob_after: policy.sequence_log_prob(prompt, &arm.chosen)?,
        });
    }
    Ok(SupportProbeReport {
        ceiling: cfg.ceiling,
        steps: cfg.steps,
        arms: reports,
    })
}

/// The documented three-arm probe: a reference policy plus low-support,
/// high-support and structurally-zero-support chosen responses sharing one
/// mid-support rejected response.
pub struct StandardProbe {
    pub reference: Policy,
    pub prompt: PromptId,
    pub arms: Vec<ProbeArm>,
}

/// Builds the standard probe on a 16-token seeded policy.
///
/// * `low_support`: successively least-likely clean tokens, then the
///   end-token, until the generation probability sits below 1e-6;
/// * `high_support`: the most likely first token followed by the
///   end-token;
/// * `zero_support`: a token *after* the end-token — carries likelihood
///   but can never be sampled.
pub fn standard_support_probe(seed: u64, max_len: usize) -> Result<StandardProbe> {
    const VOCAB: usize = 16;
    if max_len < 3 {
        return Err(Error::InvalidArgument(
            "the standard probe needs max_len >= 3".into(),
        ));
    }
    let reference = Policy::seeded_init(
        VOCAB,
        24,
        3,
        seeds::derive(seed, "probe-features"),
        seeds::derive(seed, "probe-init"),
        0.4,
    )?;
    let prompt: PromptId = 0;
    let eos = eos_token(VOCAB);

    let extreme_token = |context: &[Token], lowest: bool| -> Result<Token> {
        let dist = reference.next_token_distribution(prompt, context)?;
        let mut best: Option<Token> = None;
        for t in 0..VOCAB as Token {
            if t == eos {
                continue;
            }
            let better = |b: Token| {
                if lowest {
                    dist.probs()[t as usize] < dist.probs()[b as usize]
                } else {
                    dist.probs()[t as usize] > dist.probs()[b as usize]
                }
            };
            if best.is_none_or(better) {
                best = Some(t);
            }
        }
        Ok(best.expect("vocabulary has non-end tokens"))
    };

    // Low-support chosen: keep appending the least likely clean token until
    // appending the end-token lands the whole sequence below 1e-6.
    let mut low: Vec<Token> = Vec::new();
    loop {
        let t = extreme_token(&low, true)?;
        low.push(t);
        let mut candidate = low.clone();
        candidate.push(eos);
        let p = generation_probability(&reference, prompt, &candidate, max_len)?;
        if p < 1e-6 {
            low = candidate;
            break;
        }
        if low.len() == max_len - 1 {
            return Err(Error::DegenerateData(
                "could not construct a low-support response within max_len".into(),
            ));
        }
    }

    let top = extreme_token(&[], false)?;
    let high = vec![top, eos];
    let zero = vec![eos, extreme_token(&[], true)?];

    // Shared rejected response: the second most likely first token.
    let second = {
        let dist = reference.next_token_distribution(prompt, &[])?;
        let mut best: Option<Token> = None;
        for t in 0..VOCAB as Token {
            if t == eos || t == top {
                continue;
            }
            if best.is_none_or(|b| dist.probs()[t as usize] > dist.probs()[b as usize]) {
                best = Some(t);
            }
        }
        best.expect("vocabulary has at least three non-end tokens")
    };
    let rejected = vec![second, eos];

    Ok(StandardProbe {
        reference,
        prompt,
        arms: vec![
            ProbeArm {
                label: "low_support".into(),
                chosen: low,
                rejected: rejected.clone(),
            },
            ProbeArm {
                label: "high_support".into(),
                chosen: high,
                rejected: rejected.clone(),
            },
            ProbeArm {
                label: "zero_support".into(),
                chosen: zero,
                rejected,
            },
        ],
    })
}
