//! Synthetic task generation.
//!
//! A task is a set of prompts over a shared vocabulary. Each prompt carries a
//! hallucinated-token set `H_x` of size `round(halluc_fraction · V)` and a
//! clean ground-truth continuation that avoids `H_x` and ends with EOS.
//!
//! Hallucination sets are correlated across prompts: a global per-token
//! propensity (sharpness × standard normal) is perturbed with Gumbel noise
//! per prompt and the top tokens form `H_x`. Ground-truth tokens are drawn
//! from the complement with weights biased *away* from high-propensity
//! tokens. The correlation is what makes hallucination detection learnable
//! from bag-of-token features; sharpness 0 would make `H_x` independent
//! across prompts.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::records::PromptRecord;
use crate::policy::{eos_token, PromptId, Token};
use crate::seeds;
use crate::{Error, Result};

/// Default Gumbel-vs-propensity sharpness; large enough that hallucination
/// sets overlap heavily across prompts.
pub const DEFAULT_HALLUC_SHARPNESS: f64 = 6.0;
/// Default number of ground-truth content tokens before the terminal EOS.
pub const DEFAULT_GT_LEN: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct TaskConfig {
    pub n_prompts: usize,
    pub vocab: usize,
    pub halluc_fraction: f64,
    pub halluc_sharpness: f64,
    pub gt_len: usize,
    pub seed: u64,
}

impl TaskConfig {
    pub fn new(n_prompts: usize, vocab: usize, halluc_fraction: f64, seed: u64) -> Self {
        Self {
            n_prompts,
            vocab,
            halluc_fraction,
            halluc_sharpness: DEFAULT_HALLUC_SHARPNESS,
            gt_len: DEFAULT_GT_LEN,
            seed,
        }
    }
}

/// A validated prompt collection over a fixed vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    vocab: usize,
    prompts: Vec<PromptRecord>,
}

impl Task {
    /// Validates externally-loaded prompts against a vocabulary size.
    pub fn from_prompts(vocab: usize, prompts: Vec<PromptRecord>) -> Result<Self> {
        if vocab < 4 {
            return Err(Error::InvalidArgument(format!(
                "vocab must be >= 4 (EOS, a hallucinated token, a clean token, a spare), got {vocab}"
            )));
        }
        if prompts.is_empty() {
            return Err(Error::InvalidArgument("task has no prompts".into()));
        }
        let eos = eos_token(vocab);
        let mut seen_ids = std::collections::HashSet::new();
        for p in &prompts {
            if !seen_ids.insert(p.id) {
                return Err(Error::InvalidArgument(format!(
                    "duplicate prompt id {}",
                    p.id
                )));
            }
            if p.gt_tokens.last() != Some(&eos) {
                return Err(Error::InvalidArgument(format!(
                    "prompt {}: ground truth must end with EOS token {eos}",
                    p.id
                )));
            }
            if p.gt_tokens.iter().any(|&t| t as usize >= vocab)
                || p.halluc_set.iter().any(|&t| t as usize >= vocab)
            {
                return Err(Error::InvalidArgument(format!(
                    "prompt {}: token out of vocabulary range 0..{vocab}",
                    p.id
                )));
            }
            if p.halluc_set.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidArgument(format!(
                    "prompt {}: halluc_set must be sorted ascending without duplicates",
                    p.id
                )));
            }
            if p.halluc_set.is_empty() || p.halluc_set.len() > vocab - 2 {
                return Err(Error::InvalidArgument(format!(
                    "prompt {}: halluc_set size {} outside 1..={}",
                    p.id,
                    p.halluc_set.len(),
                    vocab - 2
                )));
            }
            if p.halluc_set.binary_search(&eos).is_ok() {
                return Err(Error::InvalidArgument(format!(
                    "prompt {}: EOS cannot be a hallucinated token",
                    p.id
                )));
            }
            if p.contains_hallucination(&p.gt_tokens) {
                return Err(Error::InvalidArgument(format!(
                    "prompt {}: ground truth intersects its hallucinated set",
                    p.id
                )));
            }
        }
        Ok(Self { vocab, prompts })
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn prompts(&self) -> &[PromptRecord] {
        &self.prompts
    }

    pub fn prompt(&self, id: PromptId) -> Option<&PromptRecord> {
        self.prompts.iter().find(|p| p.id == id)
    }
}

/// Hallucination-set size implied by a fraction: `round(f · V)`.
pub fn halluc_size(vocab: usize, halluc_fraction: f64) -> usize {
    (halluc_fraction * vocab as f64).round() as usize
}

/// Generates a deterministic synthetic task.
pub fn generate_task(cfg: &TaskConfig) -> Result<Task> {
    if cfg.n_prompts == 0 {
        return Err(Error::InvalidArgument("n_prompts must be >= 1".into()));
    }
    if !(cfg.halluc_fraction.is_finite() && cfg.halluc_fraction > 0.0 && cfg.halluc_fraction < 1.0)
    {
        return Err(Error::InvalidArgument(format!(
            "halluc_fraction must lie in (0, 1), got {}",
            cfg.halluc_fraction
        )));
    }
    if !(cfg.halluc_sharpness.is_finite() && cfg.halluc_sharpness >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "halluc_sharpness must be finite and >= 0, got {}",
            cfg.halluc_sharpness
        )));
    }
    if cfg.gt_len == 0 {
        return Err(Error::InvalidArgument("gt_len must be >= 1".into()));
    }
    if cfg.vocab < 4 {
        return Err(Error::InvalidArgument(format!(
            "vocab must be >= 4, got {}",
            cfg.vocab
        )));
    }
    let h = halluc_size(cfg.vocab, cfg.halluc_fraction);
    if h == 0 || h > cfg.vocab - 2 {
        return Err(Error::InvalidArgument(format!(
            "halluc_fraction {} at vocab {} yields hallucination set size {h}; need 1..={}",
            cfg.halluc_fraction,
            cfg.vocab,
            cfg.vocab - 2
        )));
    }

    let eos = eos_token(cfg.vocab);
    // Global token propensity shared by every prompt in the task.
    let mut prop_rng = seeds::rng(seeds::derive(cfg.seed, "task-propensity"));
    let propensity: Vec<f64> = (0..cfg.vocab)
        .map(|_| {
            cfg.halluc_sharpness
                * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut prop_rng)
        })
        .collect();

    let prompts = (0..cfg.n_prompts as u64)
        .map(|id| {
            let mut rng = seeds::rng(seeds::derive_indexed(cfg.seed, "task-prompt", &[id]));
            // H_x: Gumbel-perturbed top-h over non-EOS tokens.
            let mut perturbed: Vec<(f64, Token)> = (0..cfg.vocab as Token)
                .filter(|&t| t != eos)
                .map(|t| (propensity[t as usize] + gumbel(&mut rng), t))
                .collect();
            perturbed.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .expect("finite perturbations")
                    .then(a.1.cmp(&b.1))
            });
            let mut halluc_set: Vec<Token> = perturbed[..h].iter().map(|&(_, t)| t).collect();
            halluc_set.sort_unstable();

            // Ground truth: i.i.d. draws from the clean pool, biased away
            // from high-propensity tokens, then a terminal EOS.
            let pool: Vec<Token> = (0..cfg.vocab as Token)
                .filter(|&t| t != eos && halluc_set.binary_search(&t).is_err())
                .collect();
            let weights = clean_weights(&pool, &propensity);
            let mut gt_tokens = Vec::with_capacity(cfg.gt_len + 1);
            for _ in 0..cfg.gt_len {
                gt_tokens.push(pick(&pool, &weights, rng.random::<f64>()));
            }
            gt_tokens.push(eos);

            PromptRecord {
                id,
                gt_tokens,
                halluc_set,
            }
        })
        .collect();

    Task::from_prompts(cfg.vocab, prompts)
}

/// Standard Gumbel(0, 1) draw.
fn gumbel<R: Rng>(rng: &mut R) -> f64 {
    let u = rng.random::<f64>().max(f64::MIN_POSITIVE);
    -(-u.ln()).ln()
}

/// Softmax of −propensity/2 over the pool: clean weights favor tokens that
/// rarely appear in hallucination sets.
fn clean_weights(pool: &[Token], propensity: &[f64]) -> Vec<f64> {
    let max = pool
        .iter()
        .map(|&t| -propensity[t as usize] / 2.0)
        .fold(f64::NEG_INFINITY, f64::max);
    let unnorm: Vec<f64> = pool
        .iter()
        .map(|&t| (-propensity[t as usize] / 2.0 - max).exp())
        .collect();
    let z: f64 = unnorm.iter().sum();
    unnorm.into_iter().map(|w| w / z).collect()
}

/// Inverse-CDF pick from a weighted pool.
fn pick(pool: &[Token], weights: &[f64], u: f64) -> Token {
    let mut acc = 0.0;
    for (&t, &w) in pool.iter().zip(weights) {
        acc += w;
        if u < acc {
            return t;
        }
    }
    *pool.last().expect("non-empty pool")
}
