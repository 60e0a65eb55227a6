//! The iterative alignment loop.
//!
//! Each iteration freezes the current policy as the reference, builds a
//! fresh preference dataset from scratch (the previous iteration's pairs are
//! discarded), then runs mini-batch gradient descent on the weighted DPO
//! objective. Stage 1 (rollout/judge/select) parallelizes across prompts;
//! stage 2 is sequential over batches so the optimizer trajectory is
//! reproducible bit for bit.

use ndarray::Array2;
use rand::seq::SliceRandom;

use crate::alignment::loss::{evaluate_batch, pair_loss, PairStats, PreferencePair, Weighting};
use crate::data::{
    build_offpolicy_dataset, build_preference_dataset, Judge, PromptRecord, SamplingConfig, Task,
};
use crate::policy::{eos_token, Policy};
use crate::preference::{categorize, RaoKupper, SampleKind};
use crate::seeds;
use crate::{Error, Result};

/// Bins of the per-epoch weight histogram, spanning [0, 1].
pub const WEIGHT_HIST_BINS: usize = 20;

/// Where an iteration's preference pairs come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataMode {
    /// Sample K responses from the current policy; both sides of each pair
    /// are on-policy.
    OnPolicy,
    /// Chosen = the prompt's fixed ground-truth continuation; rejected = the
    /// highest-scoring hallucinated sample from the frozen reference.
    OffPolicyGroundTruth,
}

impl DataMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            DataMode::OnPolicy => "on_policy",
            DataMode::OffPolicyGroundTruth => "off_policy_gt",
        }
    }
}

/// When Rao-Kupper sample weights are recomputed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightRefresh {
    /// At every optimizer step, from the margins of the current parameters
    /// (the default: freshest margins).
    Step,
    /// Once per epoch, at the epoch's starting parameters, then held fixed
    /// for every batch of that epoch.
    Epoch,
}

/// Optimizer for stage 2.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    /// Plain gradient descent: W ← W − η·g.
    Sgd,
    /// Adam with β₁=0.9, β₂=0.999, ε=1e-8; moment state resets at each
    /// iteration boundary because the reference (and thus the objective)
    /// changes there.
    Adam,
}

/// Per-iteration training configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationSpec {
    pub data_mode: DataMode,
    pub beta: f64,
    /// None trains plain DPO; Some(ν) enables Rao-Kupper sample weights.
    pub nu: Option<f64>,
    pub eta: f64,
    pub epochs: usize,
    pub nll_weight: f64,
    pub weight_refresh: WeightRefresh,
}

impl IterationSpec {
    fn validate(&self, iteration: usize) -> Result<()> {
        let fail = |msg: String| {
            Err(Error::InvalidArgument(format!(
                "iteration {iteration}: {msg}"
            )))
        };
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return fail(format!("beta must be finite and > 0, got {}", self.beta));
        }
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return fail(format!("eta must be finite and > 0, got {}", self.eta));
        }
        if self.epochs == 0 {
            return fail("epochs must be >= 1".into());
        }
        if !(self.nll_weight.is_finite() && self.nll_weight >= 0.0) {
            return fail(format!(
                "nll_weight must be finite and >= 0, got {}",
                self.nll_weight
            ));
        }
        if let Some(nu) = self.nu {
            // Constructing the model validates ν ≥ 1.
            RaoKupper::new(nu)
                .map_err(|e| Error::InvalidArgument(format!("iteration {iteration}: {e}")))?;
        }
        Ok(())
    }

    fn weighting(&self) -> Result<Weighting> {
        Ok(match self.nu {
            None => Weighting::Plain,
            Some(nu) => Weighting::RaoKupper(RaoKupper::new(nu)?),
        })
    }
}

/// Run-level training configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub sampling: SamplingConfig,
    pub tau: f64,
    /// Fraction of prompts held out of training and used for the greedy
    /// hallucination-rate evaluation.
    pub holdout_fraction: f64,
    pub batch_size: usize,
    /// Extra sampling rounds for the off-policy builder's rejected search.
    pub retry_rounds: usize,
    /// Margin thresholds for the easy/hard/boundary report columns.
    pub m_easy: f64,
    pub m_hard: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub iterations: Vec<IterationSpec>,
}

impl TrainerConfig {
    /// The `paper` preset: an off-policy ground-truth warm start (β=0.5,
    /// NLL weight 0.2, plain DPO, one epoch) followed by weighted on-policy
    /// refinement (β=0.1, ν=3, five epochs, K=5).
    pub fn preset_paper(seed: u64) -> Self {
        Self {
            sampling: SamplingConfig {
                k: 5,
                temperature: 1.0,
                max_len: 8,
            },
            tau: crate::data::DEFAULT_TAU,
            holdout_fraction: 0.2,
            batch_size: 8,
            retry_rounds: 3,
            m_easy: crate::preference::DEFAULT_M_EASY,
            m_hard: crate::preference::DEFAULT_M_HARD,
            optimizer: OptimizerKind::Sgd,
            seed,
            iterations: vec![
                IterationSpec {
                    data_mode: DataMode::OffPolicyGroundTruth,
                    beta: 0.5,
                    nu: None,
                    eta: 10.0,
                    epochs: 1,
                    nll_weight: 0.2,
                    weight_refresh: WeightRefresh::Step,
                },
                IterationSpec {
                    data_mode: DataMode::OnPolicy,
                    beta: 0.1,
                    nu: Some(3.0),
                    eta: 5.0,
                    epochs: 5,
                    nll_weight: 0.0,
                    weight_refresh: WeightRefresh::Step,
                },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sampling.validate()?;
        if !(self.tau.is_finite() && self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "tau must lie in (0, 1), got {}",
                self.tau
            )));
        }
        if !(self.holdout_fraction.is_finite() && (0.0..1.0).contains(&self.holdout_fraction)) {
            return Err(Error::InvalidArgument(format!(
                "holdout_fraction must lie in [0, 1), got {}",
                self.holdout_fraction
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if !(self.m_hard.is_finite()
            && self.m_easy.is_finite()
            && self.m_hard < 0.0
            && 0.0 < self.m_easy)
        {
            return Err(Error::InvalidArgument(format!(
                "margin thresholds must satisfy m_hard < 0 < m_easy, got {} and {}",
                self.m_hard, self.m_easy
            )));
        }
        if self.iterations.is_empty() {
            return Err(Error::InvalidArgument(
                "training needs at least one iteration".into(),
            ));
        }
        for (i, spec) in self.iterations.iter().enumerate() {
            spec.validate(i + 1)?;
        }
        Ok(())
    }
}

/// Histogram of sample weights over an epoch, 20 equal bins spanning [0, 1]
/// (the last bin is closed above).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WeightHistogram {
    pub counts: Vec<usize>,
}

impl WeightHistogram {
    fn from_weights<'a>(weights: impl Iterator<Item = &'a f64>) -> Self {
        let mut counts = vec![0usize; WEIGHT_HIST_BINS];
        for &w in weights {
            let bin = ((w * WEIGHT_HIST_BINS as f64) as usize).min(WEIGHT_HIST_BINS - 1);
            counts[bin] += 1;
        }
        Self { counts }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// One report row per trained epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub iteration: usize,
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_margin: f64,
    pub mean_weight: f64,
    pub n_easy: usize,
    pub n_hard: usize,
    pub n_boundary: usize,
    pub pairs: usize,
    pub weight_hist: WeightHistogram,
}

/// One report row per iteration (plus a baseline row for iteration 0).
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRow {
    pub iteration: usize,
    pub data_mode: String,
    pub beta: f64,
    pub nu: Option<f64>,
    pub eta: f64,
    pub epochs: usize,
    pub nll_weight: f64,
    pub pairs: usize,
    /// Prompts dropped because every response landed on the clean side.
    pub filtered_clean: usize,
    /// Prompts dropped because every response landed on the hallucinated
    /// side.
    pub filtered_halluc: usize,
    /// Prompts dropped for other reasons (identical-token pairs under judge
    /// noise; off-policy prompts whose ground truth the judge flagged).
    pub filtered_other: usize,
    /// Greedy hallucination rate on the holdout set *after* this iteration.
    pub halluc_rate: f64,
}

/// Everything the trainer reports.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingReport {
    pub epochs: Vec<EpochRow>,
    pub iterations: Vec<IterationRow>,
    pub initial_halluc_rate: f64,
    pub train_prompts: usize,
    pub holdout_prompts: usize,
}

impl TrainingReport {
    /// `report.csv`: one row per epoch.
    pub fn epochs_csv(&self) -> String {
        let mut s = String::from(
            "iteration,epoch,mean_loss,mean_margin,mean_weight,n_easy,n_hard,n_boundary,pairs\n",
        );
        for r in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.iteration,
                r.epoch,
                r.mean_loss,
                r.mean_margin,
                r.mean_weight,
                r.n_easy,
                r.n_hard,
                r.n_boundary,
                r.pairs
            ));
        }
        s
    }

    /// `iterations.csv`: baseline row (iteration 0) plus one row per
    /// iteration with its configuration, filter counts and holdout rate.
    pub fn iterations_csv(&self) -> String {
        let mut s = String::from(
            "iteration,data_mode,beta,nu,eta,epochs,nll_weight,pairs,filtered_clean,filtered_halluc,filtered_other,halluc_rate\n",
        );
        for r in &self.iterations {
            let nu = r.nu.map(|v| v.to_string()).unwrap_or_default();
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.iteration,
                r.data_mode,
                r.beta,
                nu,
                r.eta,
                r.epochs,
                r.nll_weight,
                r.pairs,
                r.filtered_clean,
                r.filtered_halluc,
                r.filtered_other,
                r.halluc_rate
            ));
        }
        s
    }

    /// `weight_hist.csv`: per-epoch weight histogram in long form.
    pub fn weight_hist_csv(&self) -> String {
        let mut s = String::from("iteration,epoch,bin_lo,bin_hi,count\n");
        let width = 1.0 / WEIGHT_HIST_BINS as f64;
        for r in &self.epochs {
            for (b, &count) in r.weight_hist.counts.iter().enumerate() {
                s.push_str(&format!(
                    "{},{},{},{},{}\n",
                    r.iteration,
                    r.epoch,
                    b as f64 * width,
                    (b + 1) as f64 * width,
                    count
                ));
            }
        }
        s
    }
}

/// Final state of a training run.
#[derive(Debug, Clone)]
pub struct AlignmentOutcome {
    pub policy: Policy,
    /// Policy snapshot at the end of each iteration, in order.
    pub iteration_policies: Vec<Policy>,
    pub report: TrainingReport,
}

/// Fraction of prompts whose greedy continuation contains a token from the
/// prompt's hallucinated set. This is the ground-truth metric: it reads the
/// prompt record directly and bypasses the (possibly noisy) judge.
pub fn greedy_halluc_rate(
    policy: &Policy,
    prompts: &[PromptRecord],
    max_len: usize,
) -> Result<f64> {
    if prompts.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot evaluate on an empty prompt set".into(),
        ));
    }
    let eos = Some(eos_token(policy.vocab()));
    let mut hallucinated = 0usize;
    for p in prompts {
        let response = policy.greedy_response(p.id, max_len, eos)?;
        if p.contains_hallucination(&response.tokens) {
            hallucinated += 1;
        }
    }
    Ok(hallucinated as f64 / prompts.len() as f64)
}

/// One SGD step on the NLL-regularized DPO objective:
/// mean pair loss + nll_weight · mean NLL(chosen), all under the frozen
/// reference. With nll_weight = 0 this is a plain DPO step.
pub fn nll_regularized_step(
    policy: &Policy,
    reference: &Policy,
    pairs: &[PreferencePair],
    beta: f64,
    eta: f64,
    nll_weight: f64,
) -> Result<Policy> {
    if !(eta.is_finite() && eta > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be finite and > 0, got {eta}"
        )));
    }
    let eval = evaluate_batch(
        policy,
        reference,
        pairs,
        beta,
        Weighting::Plain,
        nll_weight,
        None,
    )?;
    let mut next = policy.clone();
    next.apply_update(&eval.grad.mapv(|g| -eta * g))?;
    Ok(next)
}

/// Adam moment state (β₁=0.9, β₂=0.999, ε=1e-8).
struct AdamState {
    m: Array2<f64>,
    v: Array2<f64>,
    t: u32,
}

enum OptimizerState {
    Sgd,
    Adam(AdamState),
}

impl OptimizerState {
    fn new(kind: OptimizerKind, dim: usize, vocab: usize) -> Self {
        match kind {
            OptimizerKind::Sgd => OptimizerState::Sgd,
            OptimizerKind::Adam => OptimizerState::Adam(AdamState {
                m: Array2::zeros((dim, vocab)),
                v: Array2::zeros((dim, vocab)),
                t: 0,
            }),
        }
    }

    /// Update to add to the weights for gradient `grad`.
    fn delta(&mut self, eta: f64, grad: &Array2<f64>) -> Array2<f64> {
        match self {
            OptimizerState::Sgd => grad.mapv(|g| -eta * g),
            OptimizerState::Adam(state) => {
                const BETA1: f64 = 0.9;
                const BETA2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                state.t += 1;
                let t = state.t as i32;
                state
                    .m
                    .zip_mut_with(grad, |m, &g| *m = BETA1 * *m + (1.0 - BETA1) * g);
                state
                    .v
                    .zip_mut_with(grad, |v, &g| *v = BETA2 * *v + (1.0 - BETA2) * g * g);
                let bc1 = 1.0 - BETA1.powi(t);
                let bc2 = 1.0 - BETA2.powi(t);
                let mut delta = Array2::zeros(grad.raw_dim());
                delta
                    .iter_mut()
                    .zip(state.m.iter().zip(state.v.iter()))
                    .for_each(|(d, (&m, &v))| {
                        *d = -eta * (m / bc1) / ((v / bc2).sqrt() + EPS);
                    });
                delta
            }
        }
    }
}

/// Splits a task into (train, holdout) halves by a seeded shuffle. The
/// holdout keeps its prompts in original id order.
fn split_holdout(task: &Task, fraction: f64, seed: u64) -> Result<(Task, Vec<PromptRecord>)> {
    let n = task.prompts().len();
    let n_holdout = ((n as f64) * fraction).round() as usize;
    let n_holdout = n_holdout.min(n.saturating_sub(1));
    if n_holdout == 0 {
        // Degenerate but allowed: evaluate on the training prompts.
        return Ok((
            Task::from_prompts(task.vocab(), task.prompts().to_vec())?,
            task.prompts().to_vec(),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeds::rng(seeds::derive(seed, "holdout-split")));
    let mut holdout_ix = order[..n_holdout].to_vec();
    let mut train_ix = order[n_holdout..].to_vec();
    holdout_ix.sort_unstable();
    train_ix.sort_unstable();
    let holdout: Vec<PromptRecord> = holdout_ix
        .iter()
        .map(|&i| task.prompts()[i].clone())
        .collect();
    let train: Vec<PromptRecord> = train_ix
        .iter()
        .map(|&i| task.prompts()[i].clone())
        .collect();
    Ok((Task::from_prompts(task.vocab(), train)?, holdout))
}

/// Runs the full iterative loop. See the module docs for the shape; on
/// success the report carries one row per epoch and per iteration, and
/// `iteration_policies[i]` is the checkpoint after iteration i+1.
pub fn run_alignment(
    initial: &Policy,
    task: &Task,
    judge: &Judge,
    cfg: &TrainerConfig,
) -> Result<AlignmentOutcome> {
    cfg.validate()?;
    let (train_task, holdout) = split_holdout(task, cfg.holdout_fraction, cfg.seed)?;
    let eval_len = cfg.sampling.max_len;
    let initial_halluc_rate = greedy_halluc_rate(initial, &holdout, eval_len)?;

    let mut policy = initial.clone();
    let mut epoch_rows = Vec::new();
    let mut iteration_rows = vec![IterationRow {
        iteration: 0,
        data_mode: "init".into(),
        beta: 0.0,
        nu: None,
        eta: 0.0,
        epochs: 0,
        nll_weight: 0.0,
        pairs: 0,
        filtered_clean: 0,
        filtered_halluc: 0,
        filtered_other: 0,
        halluc_rate: initial_halluc_rate,
    }];
    let mut iteration_policies = Vec::with_capacity(cfg.iterations.len());

    for (ix, spec) in cfg.iterations.iter().enumerate() {
        let iteration = ix + 1;
        let reference = policy.clone();
        let reference_checksum = reference.clone();
        let iter_seed = seeds::derive_indexed(cfg.seed, "iteration", &[iteration as u64]);

        // Stage 1: fresh preference dataset from the frozen reference.
        let (pairs, filtered_clean, filtered_halluc, filtered_other) = match spec.data_mode {
            DataMode::OnPolicy => {
                let (pairs, stats) = build_preference_dataset(
                    &policy,
                    &train_task,
                    judge,
                    &cfg.sampling,
                    cfg.tau,
                    iter_seed,
                )?;
                (
                    pairs,
                    stats.filtered_all_clean,
                    stats.filtered_all_halluc,
                    stats.filtered_degenerate,
                )
            }
            DataMode::OffPolicyGroundTruth => {
                let (pairs, stats) = build_offpolicy_dataset(
                    &reference,
                    &train_task,
                    judge,
                    &cfg.sampling,
                    cfg.tau,
                    cfg.retry_rounds,
                    iter_seed,
                )?;
                (
                    pairs,
                    stats.skipped_no_hallucinated,
                    0,
                    stats.skipped_gt_flagged,
                )
            }
        };
        if pairs.is_empty() {
            return Err(Error::EmptyPreferenceSet { iteration });
        }
        let weighting = spec.weighting()?;

        // Stage 2: sequential mini-batch descent against the frozen
        // reference.
        let mut optimizer = OptimizerState::new(cfg.optimizer, policy.dim(), policy.vocab());
        for epoch in 1..=spec.epochs {
            let epoch_weights: Option<Vec<f64>> = match (spec.weight_refresh, weighting) {
                (WeightRefresh::Epoch, Weighting::RaoKupper(rk)) => Some(
                    pairs
                        .iter()
                        .map(|p| {
                            pair_loss(&policy, &reference, p, spec.beta, Some(rk)).map(|s| s.weight)
                        })
                        .collect::<Result<Vec<f64>>>()?,
                ),
                _ => None,
            };
            let mut order: Vec<usize> = (0..pairs.len()).collect();
            order.shuffle(&mut seeds::rng(seeds::derive_indexed(
                cfg.seed,
                "epoch-shuffle",
                &[iteration as u64, epoch as u64],
            )));

            let mut epoch_stats: Vec<PairStats> = Vec::with_capacity(pairs.len());
            for batch_ix in order.chunks(cfg.batch_size) {
                let batch: Vec<PreferencePair> =
                    batch_ix.iter().map(|&j| pairs[j].clone()).collect();
                let frozen: Option<Vec<f64>> = epoch_weights
                    .as_ref()
                    .map(|ws| batch_ix.iter().map(|&j| ws[j]).collect());
                let eval = evaluate_batch(
                    &policy,
                    &reference,
                    &batch,
                    spec.beta,
                    weighting,
                    spec.nll_weight,
                    frozen.as_deref(),
                )?;
                let delta = optimizer.delta(spec.eta, &eval.grad);
                policy.apply_update(&delta)?;
                epoch_stats.extend(eval.stats.iter().copied());
            }

            let (mut n_easy, mut n_hard, mut n_boundary) = (0, 0, 0);
            for s in &epoch_stats {
                match categorize(s.margin, cfg.m_easy, cfg.m_hard)?.kind {
                    SampleKind::Easy => n_easy += 1,
                    SampleKind::Hard => n_hard += 1,
                    SampleKind::Boundary => n_boundary += 1,
                }
            }
            let losses: Vec<f64> = epoch_stats.iter().map(|s| s.loss).collect();
            let margins: Vec<f64> = epoch_stats.iter().map(|s| s.margin).collect();
            let weights: Vec<f64> = epoch_stats.iter().map(|s| s.weight).collect();
            epoch_rows.push(EpochRow {
                iteration,
                epoch,
                mean_loss: crate::math::mean(&losses),
                mean_margin: crate::math::mean(&margins),
                mean_weight: crate::math::mean(&weights),
                n_easy,
                n_hard,
                n_boundary,
                pairs: pairs.len(),
                weight_hist: WeightHistogram::from_weights(weights.iter()),
            });
        }
        assert!(
            reference.bitwise_eq(&reference_checksum),
            "reference policy mutated during stage 2"
        );

        iteration_rows.push(IterationRow {
            iteration,
            data_mode: spec.data_mode.as_str().into(),
            beta: spec.beta,
            nu: spec.nu,
            eta: spec.eta,
            epochs: spec.epochs,
            nll_weight: spec.nll_weight,
            pairs: pairs.len(),
            filtered_clean,
            filtered_halluc,
            filtered_other,
            halluc_rate: greedy_halluc_rate(&policy, &holdout, eval_len)?,
        });
        iteration_policies.push(policy.clone());
    }

    Ok(AlignmentOutcome {
        policy,
        iteration_policies,
        report: TrainingReport {
            epochs: epoch_rows,
            iterations: iteration_rows,
            initial_halluc_rate,
            train_prompts: train_task.prompts().len(),
            holdout_prompts: holdout.len(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_task, TaskConfig};

    fn task64(seed: u64) -> Task {
        generate_task(&TaskConfig::new(64, 16, 0.25, seed)).unwrap()
    }

    fn policy(seed: u64) -> Policy {
        Policy::seeded_init(16, 24, 3, seeds::derive(seed, "features"), seed, 0.4).unwrap()
    }

    fn uniform_config(seed: u64, nu: Option<f64>, epochs: usize) -> TrainerConfig {
        TrainerConfig {
            sampling: SamplingConfig {
                k: 5,
                temperature: 1.0,
                max_len: 8,
            },
            tau: 0.5,
            holdout_fraction: 0.2,
            batch_size: 8,
            retry_rounds: 3,
            m_easy: 2.0,
            m_hard: -2.0,
            optimizer: OptimizerKind::Sgd,
            seed,
            iterations: vec![IterationSpec {
                data_mode: DataMode::OnPolicy,
                beta: 0.1,
                nu,
                eta: 0.5,
                epochs,
                nll_weight: 0.0,
                weight_refresh: WeightRefresh::Step,
            }],
        }
    }

    #[test]
    fn same_seed_runs_are_bitwise_identical() {
        let task = task64(7);
        let judge = Judge::oracle(0.0, false, 0).unwrap();
        let cfg = uniform_config(11, Some(3.0), 2);
        let a = run_alignment(&policy(3), &task, &judge, &cfg).unwrap();
        let b = run_alignment(&policy(3), &task, &judge, &cfg).unwrap();
        assert!(a.policy.bitwise_eq(&b.policy));
        assert_eq!(a.report, b.report);
        assert_eq!(
            a.report.epochs_csv() + &a.report.iterations_csv() + &a.report.weight_hist_csv(),
            b.report.epochs_csv() + &b.report.iterations_csv() + &b.report.weight_hist_csv()
        );
    }

    #[test]
    fn nu_one_trajectory_equals_plain_dpo_bitwise() {
        let task = task64(7);
        let judge = Judge::oracle(0.0, false, 0).unwrap();
        let weighted =
            run_alignment(&policy(3), &task, &judge, &uniform_config(11, Some(1.0), 5)).unwrap();
        let plain = run_alignment(&policy(3), &task, &judge, &uniform_config(11, None, 5)).unwrap();
        assert!(weighted.policy.bitwise_eq(&plain.policy));
        assert_eq!(weighted.report.epochs.len(), plain.report.epochs.len());
        for (w, p) in weighted.report.epochs.iter().zip(&plain.report.epochs) {
            assert_eq!(w.mean_loss.to_bits(), p.mean_loss.to_bits());
            assert_eq!(w.mean_margin.to_bits(), p.mean_margin.to_bits());
        }
    }

    #[test]
    fn report_shape_matches_configuration() {
        let task = task64(9);
        let judge = Judge::oracle(0.0, false, 0).unwrap();
        let mut cfg = uniform_config(5, Some(3.0), 2);
        cfg.iterations = TrainerConfig::preset_paper(5).iterations;
        cfg.iterations[0].epochs = 1;
        cfg.iterations[1].epochs = 2;
        let out = run_alignment(&policy(4), &task, &judge, &cfg).unwrap();
        // Baseline row + one per iteration.
        assert_eq!(out.report.iterations.len(), 3);
        assert_eq!(out.report.iterations[0].iteration, 0);
        assert_eq!(out.report.iterations[1].data_mode, "off_policy_gt");
        assert_eq!(out.report.iterations[1].beta, 0.5);
        assert_eq!(out.report.iterations[1].nll_weight, 0.2);
        assert_eq!(out.report.iterations[2].data_mode, "on_policy");
        assert_eq!(out.report.iterations[2].nu, Some(3.0));
        assert_eq!(out.report.epochs.len(), 1 + 2);
        assert_eq!(out.iteration_policies.len(), 2);
        assert!(out.iteration_policies[1].bitwise_eq(&out.policy));
        // 64 prompts, 20% holdout.
        assert_eq!(out.report.holdout_prompts, 13);
        assert_eq!(out.report.train_prompts, 51);
        // Epoch CSV has the documented header and row count.
        let csv = out.report.epochs_csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "iteration,epoch,mean_loss,mean_margin,mean_weight,n_easy,n_hard,n_boundary,pairs"
        );
        assert_eq!(lines.count(), 3);
        // Histogram totals match the pair count per epoch.
        for row in &out.report.epochs {
            assert_eq!(row.weight_hist.total(), row.pairs);
            assert_eq!(row.n_easy + row.n_hard + row.n_boundary, row.pairs);
        }
    }

    #[test]
    fn margins_mostly_increase_after_one_small_epoch() {
        // One epoch at a small learning rate on a frozen dataset should
        // raise the implicit-reward margin of nearly every pair.
        let mut increased = 0usize;
        let mut total = 0usize;
        for seed in 0..20u64 {
            let task = task64(100 + seed);
            let judge = Judge::oracle(0.0, false, 0).unwrap();
            let reference = policy(200 + seed);
            let (pairs, _) = build_preference_dataset(
                &reference,
                &task,
                &judge,
                &SamplingConfig {
                    k: 5,
                    temperature: 1.0,
                    max_len: 8,
                },
                0.5,
                seed,
            )
            .unwrap();
            assert!(!pairs.is_empty());
            let before: Vec<f64> = pairs
                .iter()
                .map(|p| {
                    pair_loss(&reference, &reference, p, 0.1, None)
                        .unwrap()
                        .margin
                })
                .collect();
            // Full-batch epoch: one step over all pairs at eta = 1e-3.
            let stepped =
                nll_regularized_step(&reference, &reference, &pairs, 0.1, 1e-3, 0.0).unwrap();
            let after: Vec<f64> = pairs
                .iter()
                .map(|p| {
                    pair_loss(&stepped, &reference, p, 0.1, None)
                        .unwrap()
                        .margin
                })
                .collect();
            for (b, a) in before.iter().zip(&after) {
                total += 1;
                if a > b {
                    increased += 1;
                }
            }
        }
        let frac = increased as f64 / total as f64;
        assert!(
            frac >= 0.95,
            "only {frac:.3} of pairs increased their margin"
        );
    }

    #[test]
    fn empty_dataset_is_a_distinct_failure() {
        // A one-prompt task that the clean-only policy never hallucinates
        // on produces zero pairs and the iteration-tagged error.
        let task = generate_task(&TaskConfig::new(1, 16, 0.25, 7)).unwrap();
        let prompt = &task.prompts()[0];
        let features = crate::policy::FeatureMap::new(32, 2, 999).unwrap();
        let phi = features.features(prompt.id, &[]);
        let mut weights = ndarray::Array2::<f64>::zeros((32, 16));
        for &h in &prompt.halluc_set {
            for d in 0..32 {
                weights[[d, h as usize]] = -50.0 * phi[d];
            }
        }
        let clean_policy = Policy::from_weights(16, 2, 999, weights).unwrap();
        let judge = Judge::oracle(0.0, false, 0).unwrap();
        let mut cfg = uniform_config(3, None, 1);
        cfg.holdout_fraction = 0.0;
        cfg.sampling.max_len = 1;
        let err = run_alignment(&clean_policy, &task, &judge, &cfg).unwrap_err();
        match err {
            Error::EmptyPreferenceSet { iteration } => assert_eq!(iteration, 1),
            other => panic!("expected EmptyPreferenceSet, got {other}"),
        }
    }

    #[test]
    fn nll_step_with_zero_weight_is_plain_dpo_step() {
        let task = task64(7);
        let judge = Judge::oracle(0.0, false, 0).unwrap();
        let reference = policy(3);
        let (pairs, _) = build_preference_dataset(
            &reference,
            &task,
            &judge,
            &SamplingConfig {
                k: 4,
                temperature: 1.0,
                max_len: 6,
            },
            0.5,
            1,
        )
        .unwrap();
        let a = nll_regularized_step(&reference, &reference, &pairs, 0.2, 0.1, 0.0).unwrap();
        let eval = evaluate_batch(
            &reference,
            &reference,
            &pairs,
            0.2,
            Weighting::Plain,
            0.0,
            None,
        )
        .unwrap();
        let mut b = reference.clone();
        b.apply_update(&eval.grad.mapv(|g| -0.1 * g)).unwrap();
        assert!(a.bitwise_eq(&b));
    }

    #[test]
    fn nll_of_chosen_decreases_over_fifty_steps() {
        let task = task64(21);
        let judge = Judge::oracle(0.0, false, 0).unwrap();
        let reference = policy(22);
        let (pairs, _) = build_offpolicy_dataset(
            &reference,
            &task,
            &judge,
            &SamplingConfig {
                k: 5,
                temperature: 1.0,
                max_len: 8,
            },
            0.5,
            3,
            2,
        )
        .unwrap();
        assert!(pairs.len() >= 8);
        let nll = |p: &Policy| -> f64 {
            let vals: Vec<f64> = pairs
                .iter()
                .map(|pair| {
                    -p.sequence_log_prob(pair.prompt, &pair.chosen.tokens)
                        .unwrap()
                })
                .collect();
            crate::math::mean(&vals)
        };
        let mut current = reference.clone();
        let before = nll(&current);
        for _ in 0..50 {
            current = nll_regularized_step(&current, &reference, &pairs, 0.5, 0.2, 0.2).unwrap();
        }
        let after = nll(&current);
        assert!(
            after < before,
            "chosen NLL did not decrease: {before} -> {after}"
        );
    }

    #[test]
    fn adam_optimizer_also_trains_deterministically() {
        let task = task64(7);
        let judge = Judge::oracle(0.0, false, 0).unwrap();
        let mut cfg = uniform_config(11, Some(3.0), 2);
        cfg.optimizer = OptimizerKind::Adam;
        cfg.iterations[0].eta = 0.05;
        let a = run_alignment(&policy(3), &task, &judge, &cfg).unwrap();
        let b = run_alignment(&policy(3), &task, &judge, &cfg).unwrap();
        assert!(a.policy.bitwise_eq(&b.policy));
        // Adam and SGD trajectories differ.
        let sgd =
            run_alignment(&policy(3), &task, &judge, &uniform_config(11, Some(3.0), 2)).unwrap();
        assert!(!a.policy.bitwise_eq(&sgd.policy));
    }

    #[test]
    fn per_epoch_weight_refresh_differs_from_per_step() {
        let task = task64(7);
        let judge = Judge::oracle(0.0, false, 0).unwrap();
        let mut step_cfg = uniform_config(11, Some(3.0), 3);
        let mut epoch_cfg = step_cfg.clone();
        epoch_cfg.iterations[0].weight_refresh = WeightRefresh::Epoch;
        step_cfg.iterations[0].weight_refresh = WeightRefresh::Step;
        let a = run_alignment(&policy(3), &task, &judge, &step_cfg).unwrap();
        let b = run_alignment(&policy(3), &task, &judge, &epoch_cfg).unwrap();
        // Same dataset, different weight schedules → different trajectories
        // (first epoch first batch agrees; later batches see stale weights).
        assert!(!a.policy.bitwise_eq(&b.policy));
        assert_eq!(a.report.epochs[0].pairs, b.report.epochs[0].pairs);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = uniform_config(1, Some(3.0), 1);
        let mut c = base.clone();
        c.iterations[0].beta = 0.0;
        assert!(c.validate().is_err());
        c = base.clone();
        c.iterations[0].nu = Some(0.5);
        assert!(c.validate().is_err());
        c = base.clone();
        c.batch_size = 0;
        assert!(c.validate().is_err());
        c = base.clone();
        c.holdout_fraction = 1.0;
        assert!(c.validate().is_err());
        c = base.clone();
        c.m_easy = -1.0;
        assert!(c.validate().is_err());
        c = base.clone();
        c.iterations.clear();
        assert!(c.validate().is_err());
        assert!(base.validate().is_ok());
    }
}
