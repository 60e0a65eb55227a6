//! On-disk record types for the pipeline's JSONL artifacts.
//!
//! Every artifact is newline-delimited JSON: one record per line, one file
//! per artifact kind. Field names and their order are stable; readers ignore
//! unknown fields so files written by newer versions stay loadable.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::policy::{PromptId, Token};
use crate::{Error, Result};

/// One prompt of a synthetic task: the ground-truth continuation (always
/// terminated by the EOS token) and the prompt's hallucinated-token set.
///
/// `halluc_set` is kept sorted ascending so files are byte-stable and
/// membership checks can use binary search.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub id: PromptId,
    pub gt_tokens: Vec<Token>,
    pub halluc_set: Vec<Token>,
}

impl PromptRecord {
    /// True when any of `tokens` lies in this prompt's hallucinated set.
    pub fn contains_hallucination(&self, tokens: &[Token]) -> bool {
        tokens
            .iter()
            .any(|t| self.halluc_set.binary_search(t).is_ok())
    }
}

/// One sampled response for a prompt. `log_prob` is the sequence
/// log-probability under the policy that generated it, recorded at
/// temperature 1 regardless of the sampling temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub prompt_id: PromptId,
    pub response_id: u32,
    pub tokens: Vec<Token>,
    pub log_prob: f64,
}

/// Judge verdict class. Serialized as the integer 0 (clean) / 1
/// (hallucinated).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Label {
    Clean,
    Hallucinated,
}

impl From<Label> for u8 {
    fn from(label: Label) -> u8 {
        match label {
            Label::Clean => 0,
            Label::Hallucinated => 1,
        }
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(value: u8) -> std::result::Result<Self, String> {
        match value {
            0 => Ok(Label::Clean),
            1 => Ok(Label::Hallucinated),
            other => Err(format!("label must be 0 or 1, got {other}")),
        }
    }
}

/// Judge output for one rollout: a hallucination score in [0, 1] and the
/// thresholded label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub prompt_id: PromptId,
    pub response_id: u32,
    pub p_halluc: f64,
    pub label: Label,
}

/// An admitted preference pair: token sequences plus the judge scores that
/// admitted them (`p_chosen < tau <= p_rejected`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub prompt_id: PromptId,
    pub chosen: Vec<Token>,
    pub rejected: Vec<Token>,
    pub p_chosen: f64,
    pub p_rejected: f64,
}

/// Writes records as newline-delimited JSON, one object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for record in records {
        serde_json::to_writer(&mut out, record)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a newline-delimited JSON file, skipping blank lines. Malformed
/// lines fail with the file path and 1-based line number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (ix, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line)
            .map_err(|e| Error::InvalidArgument(format!("{}:{}: {e}", path.display(), ix + 1)))?;
        records.push(record);
    }
    Ok(records)
}
