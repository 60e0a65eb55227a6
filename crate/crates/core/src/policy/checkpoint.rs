//! Text checkpoints for policies.
//!
//! The format is line-oriented `key = value` with `#` comments; weights are
//! stored row-major with 17 significant digits, which round-trips f64
//! bit-for-bit. Unknown keys are rejected by name so silent schema drift is
//! impossible.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::Policy;
use crate::{Error, Result};

/// Version written into (and required from) every checkpoint.
pub const SCHEMA_VERSION: u64 = 1;

const KEYS: [&str; 6] = [
    "schema_version",
    "vocab",
    "dim",
    "window",
    "seed",
    "weights",
];

impl Policy {
    /// Serializes the policy to the text checkpoint format.
    pub fn to_checkpoint_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# alignlab policy checkpoint");
        let _ = writeln!(out, "schema_version = {SCHEMA_VERSION}");
        let _ = writeln!(out, "vocab = {}", self.vocab);
        let _ = writeln!(out, "dim = {}", self.dim());
        let _ = writeln!(out, "window = {}", self.window());
        let _ = writeln!(out, "seed = {}", self.feature_map().seed());
        out.push_str("weights =");
        for &w in self.weights.iter() {
            // 17 significant digits: lossless for f64.
            let _ = write!(out, " {w:.16e}");
        }
        out.push('\n');
        out
    }

    /// Parses a policy from the text checkpoint format.
    pub fn from_checkpoint_str(text: &str) -> Result<Policy> {
        let mut fields: [Option<&str>; KEYS.len()] = Default::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "checkpoint line {}: expected `key = value`",
                    lineno + 1
                ))
            })?;
            let key = key.trim();
            let slot = KEYS.iter().position(|&k| k == key).ok_or_else(|| {
                Error::Config(format!(
                    "checkpoint line {}: unknown key `{key}`",
                    lineno + 1
                ))
            })?;
            if fields[slot].is_some() {
                return Err(Error::Config(format!(
                    "checkpoint line {}: duplicate key `{key}`",
                    lineno + 1
                )));
            }
            fields[slot] = Some(value.trim());
        }

        let get = |name: &str| -> Result<&str> {
            let slot = KEYS.iter().position(|&k| k == name).expect("known key");
            fields[slot].ok_or_else(|| Error::Config(format!("checkpoint is missing key `{name}`")))
        };
        let parse_usize = |name: &str| -> Result<usize> {
            get(name)?
                .parse()
                .map_err(|_| Error::Config(format!("checkpoint key `{name}` is not an integer")))
        };

        let version: u64 = get("schema_version")?.parse().map_err(|_| {
            Error::Config("checkpoint key `schema_version` is not an integer".into())
        })?;
        if version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint schema_version {version} (expected {SCHEMA_VERSION})"
            )));
        }
        let vocab = parse_usize("vocab")?;
        let dim = parse_usize("dim")?;
        let window = parse_usize("window")?;
        let seed: u64 = get("seed")?
            .parse()
            .map_err(|_| Error::Config("checkpoint key `seed` is not an integer".into()))?;

        let mut values = Vec::with_capacity(dim * vocab);
        for tok in get("weights")?.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| Error::Config(format!("bad weight value `{tok}` in checkpoint")))?;
            values.push(v);
        }
        if values.len() != dim * vocab {
            return Err(Error::Config(format!(
                "checkpoint has {} weight values, expected dim*vocab = {}",
                values.len(),
                dim * vocab
            )));
        }
        let weights = Array2::from_shape_vec((dim, vocab), values)
            .map_err(|e| Error::Config(format!("bad weight shape: {e}")))?;
        Policy::from_weights(vocab, window, seed, weights)
    }

    /// Writes the checkpoint to a file.
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_checkpoint_string())?;
        Ok(())
    }

    /// Loads a checkpoint from a file.
    pub fn load(path: &Path) -> Result<Policy> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read checkpoint {}: {e}", path.display()))
        })?;
        Self::from_checkpoint_str(&text)
    }
}
