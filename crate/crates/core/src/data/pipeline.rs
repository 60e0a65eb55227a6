//! The rollout → annotate → select pipeline that turns a task and a policy
//! into preference pairs.
//!
//! Each prompt is handled on its own deterministic RNG stream (derived from
//! the run seed, the prompt id, the resampling round, and the response
//! index), so the pipeline can fan out across worker threads and still
//! produce byte-identical artifacts in prompt order.

use rayon::prelude::*;

use crate::alignment::PreferencePair;
use crate::data::judge::Judge;
use crate::data::records::{AnnotationRecord, Label, RolloutRecord};
use crate::data::task::Task;
use crate::policy::{eos_token, Policy, PromptId, Response};
use crate::seeds;
use crate::{Error, Result};

/// How responses are sampled when building rollouts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingConfig {
    /// Responses per prompt (K).
    pub k: usize,
    pub temperature: f64,
    pub max_len: usize,
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 responses per prompt, got k={}",
                self.k
            )));
        }
        if self.max_len == 0 {
            return Err(Error::InvalidArgument("max_len must be >= 1".into()));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be finite and > 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// One judged rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedResponse {
    pub rollout: RolloutRecord,
    pub p_halluc: f64,
    pub label: Label,
}

/// All judged rollouts for one prompt, in response-id order.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedSet {
    pub prompt_id: PromptId,
    pub responses: Vec<AnnotatedResponse>,
}

/// Result of pair selection for one prompt.
#[derive(Debug, Clone, PartialEq)]
pub enum Selection {
    Admitted(PreferencePair),
    /// Every response scored below τ; nothing to reject.
    AllClean,
    /// Every response scored at or above τ; nothing to choose.
    AllHallucinated,
    /// Both sides exist but the argmax rejected candidate has the same
    /// tokens as the chosen response (possible only under judge noise).
    Degenerate,
}

/// Per-dataset admission statistics.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FilterStats {
    pub admitted: usize,
    pub filtered_all_clean: usize,
    pub filtered_all_halluc: usize,
    pub filtered_degenerate: usize,
}

impl FilterStats {
    pub fn total(&self) -> usize {
        self.admitted
            + self.filtered_all_clean
            + self.filtered_all_halluc
            + self.filtered_degenerate
    }

    fn record(&mut self, selection: &Selection) {
        match selection {
            Selection::Admitted(_) => self.admitted += 1,
            Selection::AllClean => self.filtered_all_clean += 1,
            Selection::AllHallucinated => self.filtered_all_halluc += 1,
            Selection::Degenerate => self.filtered_degenerate += 1,
        }
    }
}

/// Samples K responses for one prompt. Response j in round r draws its RNG
/// stream from (seed, prompt id, r, j).
pub fn sample_rollouts(
    policy: &Policy,
    prompt_id: PromptId,
    sampling: &SamplingConfig,
    seed: u64,
    round: u64,
) -> Result<Vec<RolloutRecord>> {
    sampling.validate()?;
    let eos = Some(eos_token(policy.vocab()));
    (0..sampling.k)
        .map(|j| {
            let response = policy.sample_response(
                prompt_id,
                sampling.temperature,
                sampling.max_len,
                eos,
                seeds::derive_indexed(seed, "rollout", &[prompt_id, round, j as u64]),
            )?;
            Ok(RolloutRecord {
                prompt_id,
                response_id: j as u32,
                tokens: response.tokens,
                log_prob: response.log_prob,
            })
        })
        .collect()
}

/// Samples rollouts for every prompt in the task, in prompt order within the
/// output. Prompt-level work runs in parallel.
pub fn sample_rollout_records(
    policy: &Policy,
    task: &Task,
    sampling: &SamplingConfig,
    seed: u64,
    round: u64,
) -> Result<Vec<RolloutRecord>> {
    sampling.validate()?;
    let per_prompt: Result<Vec<Vec<RolloutRecord>>> = task
        .prompts()
        .par_iter()
        .map(|p| sample_rollouts(policy, p.id, sampling, seed, round))
        .collect();
    Ok(per_prompt?.into_iter().flatten().collect())
}

/// Judges a flat list of rollouts. Rollout order is preserved.
pub fn annotate_records(
    judge: &Judge,
    task: &Task,
    rollouts: &[RolloutRecord],
) -> Result<Vec<AnnotationRecord>> {
    rollouts
        .par_iter()
        .map(|r| {
            let prompt = task.prompt(r.prompt_id).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "rollout references unknown prompt id {}",
                    r.prompt_id
                ))
            })?;
            let verdict = judge.judge(prompt, r.response_id, &r.tokens)?;
            Ok(AnnotationRecord {
                prompt_id: r.prompt_id,
                response_id: r.response_id,
                p_halluc: verdict.p_halluc,
                label: verdict.label,
            })
        })
        .collect()
}

/// Joins rollouts with their annotations into per-prompt sets, preserving
/// first-appearance prompt order. Every rollout must have exactly one
/// annotation.
pub fn group_annotated(
    rollouts: &[RolloutRecord],
    annotations: &[AnnotationRecord],
) -> Result<Vec<AnnotatedSet>> {
    use std::collections::HashMap;
    let mut by_key: HashMap<(PromptId, u32), &AnnotationRecord> = HashMap::new();
    for a in annotations {
        if by_key.insert((a.prompt_id, a.response_id), a).is_some() {
            return Err(Error::InvalidArgument(format!(
                "duplicate annotation for prompt {} response {}",
                a.prompt_id, a.response_id
            )));
        }
    }
    let mut order: Vec<PromptId> = Vec::new();
    let mut sets: HashMap<PromptId, Vec<AnnotatedResponse>> = HashMap::new();
    for r in rollouts {
        let a = by_key
            .remove(&(r.prompt_id, r.response_id))
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "missing annotation for prompt {} response {}",
                    r.prompt_id, r.response_id
                ))
            })?;
        if !sets.contains_key(&r.prompt_id) {
            order.push(r.prompt_id);
        }
        sets.entry(r.prompt_id)
            .or_default()
            .push(AnnotatedResponse {
                rollout: r.clone(),
                p_halluc: a.p_halluc,
                label: a.label,
            });
    }
    if !by_key.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} annotation(s) reference rollouts that do not exist",
            by_key.len()
        )));
    }
    Ok(order
        .into_iter()
        .map(|prompt_id| AnnotatedSet {
            responses: sets.remove(&prompt_id).expect("grouped above"),
            prompt_id,
        })
        .collect())
}

/// Selects a preference pair from one prompt's judged rollouts.
///
/// Chosen is the argmin score among responses with p < τ; rejected is the
/// argmax score among responses with p ≥ τ; ties break toward the earliest
/// list index. Returns a filter verdict instead of a pair when either side
/// is empty.
pub fn select_pair(set: &AnnotatedSet, tau: f64) -> Result<Selection> {
    if set.responses.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "prompt {}: need at least 2 judged responses, got {}",
            set.prompt_id,
            set.responses.len()
        )));
    }
    if !(tau.is_finite() && tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "tau must lie in (0, 1), got {tau}"
        )));
    }
    let mut chosen: Option<&AnnotatedResponse> = None;
    let mut rejected: Option<&AnnotatedResponse> = None;
    for r in &set.responses {
        if !(r.p_halluc.is_finite() && (0.0..=1.0).contains(&r.p_halluc)) {
            return Err(Error::InvalidArgument(format!(
                "prompt {} response {}: score {} outside [0, 1]",
                set.prompt_id, r.rollout.response_id, r.p_halluc
            )));
        }
        let labeled_halluc = r.p_halluc >= tau;
        if labeled_halluc != (r.label == Label::Hallucinated) {
            return Err(Error::InvalidArgument(format!(
                "prompt {} response {}: label inconsistent with score {} at tau {tau}",
                set.prompt_id, r.rollout.response_id, r.p_halluc
            )));
        }
        if labeled_halluc {
            // Strict > keeps the earliest index on ties.
            if rejected.is_none_or(|best| r.p_halluc > best.p_halluc) {
                rejected = Some(r);
            }
        } else if chosen.is_none_or(|best| r.p_halluc < best.p_halluc) {
            chosen = Some(r);
        }
    }
    let (chosen, rejected) = match (chosen, rejected) {
        (Some(c), Some(r)) => (c, r),
        (Some(_), None) => return Ok(Selection::AllClean),
        (None, Some(_)) => return Ok(Selection::AllHallucinated),
        (None, None) => unreachable!("every response lands on one side"),
    };
    if chosen.rollout.tokens == rejected.rollout.tokens {
        return Ok(Selection::Degenerate);
    }
    let pair = PreferencePair {
        prompt: set.prompt_id,
        chosen: Response {
            tokens: chosen.rollout.tokens.clone(),
            log_prob: chosen.rollout.log_prob,
        },
        rejected: Response {
            tokens: rejected.rollout.tokens.clone(),
            log_prob: rejected.rollout.log_prob,
        },
        p_chosen: chosen.p_halluc,
        p_rejected: rejected.p_halluc,
    };
    pair.validate(tau)?;
    Ok(Selection::Admitted(pair))
}

/// Stage 1 of the on-policy recipe: sample K responses per prompt from the
/// current policy, judge them, and keep prompts whose responses land on both
/// sides of τ. Single round, no resampling; pairs come back in prompt order.
pub fn build_preference_dataset(
    policy: &Policy,
    task: &Task,
    judge: &Judge,
    sampling: &SamplingConfig,
    tau: f64,
    seed: u64,
) -> Result<(Vec<PreferencePair>, FilterStats)> {
    sampling.validate()?;
    let selections: Result<Vec<Selection>> = task
        .prompts()
        .par_iter()
        .map(|prompt| {
            let rollouts = sample_rollouts(policy, prompt.id, sampling, seed, 0)?;
            let responses = rollouts
                .iter()
                .map(|r| {
                    let verdict = judge.judge(prompt, r.response_id, &r.tokens)?;
                    Ok(AnnotatedResponse {
                        rollout: r.clone(),
                        p_halluc: verdict.p_halluc,
                        label: verdict.label,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            select_pair(
                &AnnotatedSet {
                    prompt_id: prompt.id,
                    responses,
                },
                tau,
            )
        })
        .collect();
    let mut stats = FilterStats::default();
    let mut pairs = Vec::new();
    for selection in selections? {
        stats.record(&selection);
        if let Selection::Admitted(pair) = selection {
            pairs.push(pair);
        }
    }
    Ok((pairs, stats))
}

/// Per-dataset statistics for the off-policy builder.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OffPolicyStats {
    pub admitted: usize,
    /// Prompts with no hallucinated sample after all retry rounds.
    pub skipped_no_hallucinated: usize,
    /// Prompts whose ground truth the judge itself scored ≥ τ.
    pub skipped_gt_flagged: usize,
    /// Total extra sampling rounds consumed across prompts.
    pub extra_rounds: usize,
}

/// Stage 1 of the off-policy recipe: the chosen response is the prompt's
/// fixed ground-truth continuation (scored by the judge, log-prob under
/// `reference`), and the rejected response is the highest-scoring
/// hallucinated sample from `reference`. Prompts with no hallucinated sample
/// are resampled up to `retry_rounds` more times, then skipped.
pub fn build_offpolicy_dataset(
    reference: &Policy,
    task: &Task,
    judge: &Judge,
    sampling: &SamplingConfig,
    tau: f64,
    retry_rounds: usize,
    seed: u64,
) -> Result<(Vec<PreferencePair>, OffPolicyStats)> {
    sampling.validate()?;
    if !(tau.is_finite() && tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "tau must lie in (0, 1), got {tau}"
        )));
    }
    /// Per-prompt outcome before reduction.
    enum Outcome {
        Admitted(PreferencePair, usize),
        NoHallucinated(usize),
        GtFlagged,
    }
    let outcomes: Result<Vec<Outcome>> = task
        .prompts()
        .par_iter()
        .map(|prompt| {
            // The ground truth is judged like any response; a flipped
            // verdict poisons the chosen side, so the prompt is dropped.
            let gt_verdict = judge.judge(prompt, u32::MAX, &prompt.gt_tokens)?;
            if gt_verdict.p_halluc >= tau {
                return Ok(Outcome::GtFlagged);
            }
            let chosen = Response {
                tokens: prompt.gt_tokens.clone(),
                log_prob: reference.sequence_log_prob(prompt.id, &prompt.gt_tokens)?,
            };
            for round in 0..=retry_rounds as u64 {
                let rollouts = sample_rollouts(reference, prompt.id, sampling, seed, round)?;
                let mut best: Option<(&RolloutRecord, f64)> = None;
                for r in &rollouts {
                    let verdict = judge.judge(prompt, r.response_id, &r.tokens)?;
                    if verdict.p_halluc >= tau
                        && r.tokens != chosen.tokens
                        && best.is_none_or(|(_, p)| verdict.p_halluc > p)
                    {
                        best = Some((r, verdict.p_halluc));
                    }
                }
                if let Some((rejected, p_rejected)) = best {
                    let pair = PreferencePair {
                        prompt: prompt.id,
                        chosen: chosen.clone(),
                        rejected: Response {
                            tokens: rejected.tokens.clone(),
                            log_prob: rejected.log_prob,
                        },
                        p_chosen: gt_verdict.p_halluc,
                        p_rejected,
                    };
                    pair.validate(tau)?;
                    return Ok(Outcome::Admitted(pair, round as usize));
                }
            }
            Ok(Outcome::NoHallucinated(retry_rounds))
        })
        .collect();
    let mut stats = OffPolicyStats::default();
    let mut pairs = Vec::new();
    for outcome in outcomes? {
        match outcome {
            Outcome::Admitted(pair, extra) => {
                stats.admitted += 1;
                stats.extra_rounds += extra;
                pairs.push(pair);
            }
            Outcome::NoHallucinated(extra) => {
                stats.skipped_no_hallucinated += 1;
                stats.extra_rounds += extra;
            }
            Outcome::GtFlagged => stats.skipped_gt_flagged += 1,
        }
    }
    Ok((pairs, stats))
}
