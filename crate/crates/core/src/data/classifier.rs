//! Learned hallucination classifier: logistic regression over a fixed
//! feature recipe.
//!
//! Features for (prompt, response): bag-of-token counts over the vocabulary,
//! followed by a low-dimensional ±1 prompt-identity block, followed by two
//! ground-truth-overlap counts (tokens inside / outside the prompt's
//! ground-truth continuation). The overlap block is what lets the classifier
//! use the reference answer as side information rather than memorizing every
//! prompt.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::records::PromptRecord;
use crate::data::task::Task;
use crate::math::sigmoid;
use crate::policy::{eos_token, Policy, Token};
use crate::seeds;
use crate::{Error, Result};

/// Number of ±1 prompt-identity features.
pub const PROMPT_IDENTITY_DIM: usize = 8;

/// Deterministic featurization shared by training and scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureRecipe {
    pub vocab: usize,
    pub prompt_dim: usize,
    pub seed: u64,
}

impl FeatureRecipe {
    pub fn new(vocab: usize, seed: u64) -> Self {
        Self {
            vocab,
            prompt_dim: PROMPT_IDENTITY_DIM,
            seed,
        }
    }

    pub fn dim(&self) -> usize {
        self.vocab + self.prompt_dim + 2
    }

    /// Feature vector for a response in the context of its prompt.
    pub fn features(&self, prompt: &PromptRecord, tokens: &[Token]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        for &t in tokens {
            let t = t as usize;
            if t >= self.vocab {
                return Err(Error::InvalidArgument(format!(
                    "token {t} outside vocabulary 0..{}",
                    self.vocab
                )));
            }
            out[t] += 1.0;
        }
        let mut rng = seeds::rng(seeds::derive_indexed(
            self.seed,
            "prompt-identity",
            &[prompt.id],
        ));
        for slot in out.iter_mut().skip(self.vocab).take(self.prompt_dim) {
            *slot = if rng.random::<f64>() < 0.5 { -1.0 } else { 1.0 };
        }
        let in_gt = tokens
            .iter()
            .filter(|t| prompt.gt_tokens.contains(t))
            .count() as f64;
        out[self.vocab + self.prompt_dim] = in_gt;
        out[self.vocab + self.prompt_dim + 1] = tokens.len() as f64 - in_gt;
        Ok(out)
    }
}

/// Binary logistic model over [`FeatureRecipe`] features.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticClassifier {
    recipe: FeatureRecipe,
    weights: Vec<f64>,
    bias: f64,
}

impl LogisticClassifier {
    pub fn new(recipe: FeatureRecipe, weights: Vec<f64>, bias: f64) -> Result<Self> {
        if weights.len() != recipe.dim() {
            return Err(Error::ShapeMismatch(format!(
                "classifier expects {} weights, got {}",
                recipe.dim(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) || !bias.is_finite() {
            return Err(Error::NonFinite(
                "classifier parameters must be finite".into(),
            ));
        }
        Ok(Self {
            recipe,
            weights,
            bias,
        })
    }

    pub fn recipe(&self) -> &FeatureRecipe {
        &self.recipe
    }

    /// Hallucination probability for a response.
    pub fn score(&self, prompt: &PromptRecord, tokens: &[Token]) -> Result<f64> {
        let f = self.recipe.features(prompt, tokens)?;
        Ok(sigmoid(dot(&self.weights, &f) + self.bias))
    }

    /// Text checkpoint, round-trippable bitwise.
    pub fn to_checkpoint_string(&self) -> String {
        let mut s = String::from("# alignlab classifier checkpoint\n");
        s.push_str("schema_version = 1\n");
        s.push_str(&format!("vocab = {}\n", self.recipe.vocab));
        s.push_str(&format!("prompt_dim = {}\n", self.recipe.prompt_dim));
        s.push_str(&format!("seed = {}\n", self.recipe.seed));
        s.push_str(&format!("bias = {:.16e}\n", self.bias));
        let joined: Vec<String> = self.weights.iter().map(|w| format!("{w:.16e}")).collect();
        s.push_str(&format!("weights = {}\n", joined.join(" ")));
        s
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let mut vocab = None;
        let mut prompt_dim = None;
        let mut seed = None;
        let mut bias = None;
        let mut weights = None;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidArgument(format!("classifier checkpoint line without '=': {line}"))
            })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "schema_version" => {
                    if value != "1" {
                        return Err(Error::InvalidArgument(format!(
                            "unsupported classifier checkpoint version {value}"
                        )));
                    }
                }
                "vocab" => vocab = Some(parse_num::<usize>(key, value)?),
                "prompt_dim" => prompt_dim = Some(parse_num::<usize>(key, value)?),
                "seed" => seed = Some(parse_num::<u64>(key, value)?),
                "bias" => bias = Some(parse_num::<f64>(key, value)?),
                "weights" => {
                    let ws: Result<Vec<f64>> = value
                        .split_whitespace()
                        .map(|w| parse_num::<f64>("weights", w))
                        .collect();
                    weights = Some(ws?);
                }
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "unknown classifier checkpoint key: {other}"
                    )));
                }
            }
        }
        let missing =
            |k: &str| Error::InvalidArgument(format!("classifier checkpoint missing {k}"));
        let recipe = FeatureRecipe {
            vocab: vocab.ok_or_else(|| missing("vocab"))?,
            prompt_dim: prompt_dim.ok_or_else(|| missing("prompt_dim"))?,
            seed: seed.ok_or_else(|| missing("seed"))?,
        };
        Self::new(
            recipe,
            weights.ok_or_else(|| missing("weights"))?,
            bias.ok_or_else(|| missing("bias"))?,
        )
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint_str(&fs::read_to_string(path)?)
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse::<T>().map_err(|_| {
        Error::InvalidArgument(format!(
            "classifier checkpoint key {key}: bad value {value:?}"
        ))
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Labeled feature corpus with a held-out validation fraction.
#[derive(Debug, Clone)]
pub struct ClassifierTrainSet {
    pub recipe: FeatureRecipe,
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<bool>,
    pub val_fraction: f64,
}

impl ClassifierTrainSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Samples `n_examples` responses from `sampler` across the task's prompts
/// (round robin) and labels each with exact hallucination-set containment.
pub fn build_train_set(
    task: &Task,
    sampler: &Policy,
    n_examples: usize,
    temperature: f64,
    max_len: usize,
    val_fraction: f64,
    seed: u64,
) -> Result<ClassifierTrainSet> {
    if n_examples < 2 {
        return Err(Error::InvalidArgument(
            "need at least 2 classifier examples".into(),
        ));
    }
    let recipe = FeatureRecipe::new(task.vocab(), seeds::derive(seed, "classifier-features"));
    let eos = Some(eos_token(task.vocab()));
    let mut features = Vec::with_capacity(n_examples);
    let mut labels = Vec::with_capacity(n_examples);
    for i in 0..n_examples {
        let prompt = &task.prompts()[i % task.prompts().len()];
        let response = sampler.sample_response(
            prompt.id,
            temperature,
            max_len,
            eos,
            seeds::derive_indexed(seed, "classifier-example", &[i as u64]),
        )?;
        features.push(recipe.features(prompt, &response.tokens)?);
        labels.push(prompt.contains_hallucination(&response.tokens));
    }
    Ok(ClassifierTrainSet {
        recipe,
        features,
        labels,
        val_fraction,
    })
}

/// Mean cross-entropy loss and its gradient in (weights, bias) at the given
/// parameters. Exposed so the gradient can be checked against finite
/// differences.
pub fn logistic_loss_and_gradient(
    features: &[Vec<f64>],
    labels: &[bool],
    weights: &[f64],
    bias: f64,
) -> (f64, Vec<f64>, f64) {
    let n = labels.len() as f64;
    let mut loss = 0.0;
    let mut grad_w = vec![0.0; weights.len()];
    let mut grad_b = 0.0;
    for (f, &label) in features.iter().zip(labels) {
        let z = dot(weights, f) + bias;
        let p = sigmoid(z);
        let y = if label { 1.0 } else { 0.0 };
        // Cross-entropy via softplus keeps extreme z finite:
        // −[y ln p + (1−y) ln(1−p)] = softplus(z) − y·z.
        loss += crate::math::softplus(z) - y * z;
        let residual = p - y;
        for (g, x) in grad_w.iter_mut().zip(f) {
            *g += residual * x;
        }
        grad_b += residual;
    }
    loss /= n;
    for g in grad_w.iter_mut() {
        *g /= n;
    }
    grad_b /= n;
    (loss, grad_w, grad_b)
}

/// Outcome of classifier training.
#[derive(Debug, Clone)]
pub struct TrainedClassifier {
    pub classifier: LogisticClassifier,
    pub train_loss: Vec<f64>,
    pub val_accuracy: f64,
    pub n_train: usize,
    pub n_val: usize,
}

/// Fits logistic regression by full-batch gradient descent.
///
/// The bias starts at the train-split log-odds ln(pos/neg), so an untrained
/// model (epochs = 0) predicts the majority class everywhere and its
/// validation accuracy equals the majority-class rate.
pub fn train_classifier(
    set: &ClassifierTrainSet,
    eta: f64,
    epochs: usize,
    seed: u64,
) -> Result<TrainedClassifier> {
    if !(eta.is_finite() && eta > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "classifier eta must be finite and > 0, got {eta}"
        )));
    }
    if !(set.val_fraction.is_finite() && (0.0..1.0).contains(&set.val_fraction)) {
        return Err(Error::InvalidArgument(format!(
            "val_fraction must lie in [0, 1), got {}",
            set.val_fraction
        )));
    }
    if set.len() < 2 {
        return Err(Error::DegenerateData(
            "classifier corpus needs at least 2 examples".into(),
        ));
    }
    for f in &set.features {
        if f.len() != set.recipe.dim() {
            return Err(Error::ShapeMismatch(format!(
                "feature vector of length {} does not match recipe dim {}",
                f.len(),
                set.recipe.dim()
            )));
        }
    }

    // Deterministic shuffled split; validation rows first.
    let mut order: Vec<usize> = (0..set.len()).collect();
    order.shuffle(&mut seeds::rng(seeds::derive(seed, "classifier-split")));
    let n_val = ((set.len() as f64) * set.val_fraction).round() as usize;
    let n_val = n_val.min(set.len() - 1);
    let (val_ix, train_ix) = order.split_at(n_val);

    let gather = |ixs: &[usize]| -> (Vec<Vec<f64>>, Vec<bool>) {
        (
            ixs.iter().map(|&i| set.features[i].clone()).collect(),
            ixs.iter().map(|&i| set.labels[i]).collect(),
        )
    };
    let (train_f, train_l) = gather(train_ix);
    let (val_f, val_l) = if n_val == 0 {
        (train_f.clone(), train_l.clone())
    } else {
        gather(val_ix)
    };

    let pos = train_l.iter().filter(|&&l| l).count();
    let neg = train_l.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::DegenerateData(format!(
            "single-class training split ({pos} hallucinated / {neg} clean); cannot fit a classifier"
        )));
    }

    let mut weights = vec![0.0; set.recipe.dim()];
    let mut bias = (pos as f64 / neg as f64).ln();
    let mut train_loss = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let (loss, grad_w, grad_b) = logistic_loss_and_gradient(&train_f, &train_l, &weights, bias);
        train_loss.push(loss);
        for (w, g) in weights.iter_mut().zip(&grad_w) {
            *w -= eta * g;
        }
        bias -= eta * grad_b;
        if !bias.is_finite() || weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::NonFinite(
                "classifier parameters diverged; reduce eta".into(),
            ));
        }
    }

    let classifier = LogisticClassifier::new(set.recipe, weights, bias)?;
    let correct = val_f
        .iter()
        .zip(&val_l)
        .filter(|(f, &l)| {
            let p = sigmoid(dot(classifier.weights.as_slice(), f) + classifier.bias);
            (p >= 0.5) == l
        })
        .count();
    Ok(TrainedClassifier {
        classifier,
        train_loss,
        val_accuracy: correct as f64 / val_l.len() as f64,
        n_train: train_l.len(),
        n_val: val_l.len(),
    })
}
