//! Actor checkpoints: versioned JSON with a SHA-256 checksum over the payload.

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use quadlab::nn::{Activation, Mlp};

use crate::output::sha256_hex;
use crate::{CliError, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const CHECKPOINT_KIND: &str = "td3-actor";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ChecksumOrVersionError {
    #[error("checkpoint is not valid JSON or misses fields: {0}")]
    Malformed(String),
    #[error("unsupported checkpoint format version {found} (supported: {supported})")]
    Version { found: u64, supported: u32 },
    #[error("checkpoint checksum mismatch: stored {stored}, computed {computed}")]
    Checksum { stored: String, computed: String },
    #[error("checkpoint parameters are inconsistent: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub kind: String,
    pub sizes: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
    /// Per layer, `(out, in)` matrix flattened row-major.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    /// Configuration the actor was trained under.
    pub config: serde_json::Value,
    /// Hex SHA-256 of this document serialised with an empty checksum.
    pub checksum: String,
}

impl Checkpoint {
    pub fn from_actor(actor: &Mlp, config: serde_json::Value) -> Self {
        let mut ck = Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            kind: CHECKPOINT_KIND.into(),
            sizes: actor.sizes().to_vec(),
            hidden_activation: actor.hidden_activation(),
            output_activation: actor.output_activation(),
            weights: actor.weights().iter().map(|w| w.iter().copied().collect()).collect(),
            biases: actor.biases().iter().map(|b| b.to_vec()).collect(),
            config,
            checksum: String::new(),
        };
        ck.checksum = ck.compute_checksum();
        ck
    }

    fn compute_checksum(&self) -> String {
        let blank = Self {
            checksum: String::new(),
            ..self.clone()
        };
        sha256_hex(&serde_json::to_vec(&blank).expect("checkpoint serialises"))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        crate::output::json_bytes(self)
    }

    /// Parses and verifies version, checksum and parameter shapes.
    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, ChecksumOrVersionError> {
        let value: serde_json::Value =
            serde_json::from_slice(bytes).map_err(|e| ChecksumOrVersionError::Malformed(e.to_string()))?;
        let version = value
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| ChecksumOrVersionError::Malformed("missing format_version".into()))?;
        if version != CHECKPOINT_FORMAT_VERSION as u64 {
            return Err(ChecksumOrVersionError::Version {
                found: version,
                supported: CHECKPOINT_FORMAT_VERSION,
            });
        }
        let ck: Self =
            serde_json::from_value(value).map_err(|e| ChecksumOrVersionError::Malformed(e.to_string()))?;
        let computed = ck.compute_checksum();
        if computed != ck.checksum {
            return Err(ChecksumOrVersionError::Checksum {
                stored: ck.checksum,
                computed,
            });
        }
        if ck.kind != CHECKPOINT_KIND {
            return Err(ChecksumOrVersionError::Malformed(format!("unknown kind `{}`", ck.kind)));
        }
        ck.actor()?;
        Ok(ck)
    }

    pub fn actor(&self) -> std::result::Result<Mlp, ChecksumOrVersionError> {
        let shape = |m: String| ChecksumOrVersionError::Shape(m);
        let layers = self.sizes.len().saturating_sub(1);
        if layers == 0 || self.weights.len() != layers || self.biases.len() != layers {
            return Err(shape(format!("{} sizes but {} weight layers", self.sizes.len(), self.weights.len())));
        }
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let (rows, cols) = (self.sizes[l + 1], self.sizes[l]);
            let w = Array2::from_shape_vec((rows, cols), w.clone())
                .map_err(|e| shape(format!("layer {l} weights: {e}")))?;
            if b.len() != rows {
                return Err(shape(format!("layer {l} has {} biases, expected {rows}", b.len())));
            }
            weights.push(w);
            biases.push(Array1::from_vec(b.clone()));
        }
        Mlp::from_parts(weights, biases, self.hidden_activation, self.output_activation)
            .map_err(|e| shape(e.to_string()))
    }
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(Checkpoint::from_bytes(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn actor() -> Mlp {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        Mlp::new(&[12, 8, 3], Activation::Relu, Activation::Tanh, &mut rng).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let a = actor();
        let ck = Checkpoint::from_actor(&a, serde_json::json!({"k": 1}));
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back, ck);
        let b = back.actor().unwrap();
        assert_eq!(b.flat_params(), a.flat_params());
        let x = [0.3; 12];
        assert_eq!(a.forward(&x).unwrap(), b.forward(&x).unwrap());
    }

    #[test]
    fn corruption_is_detected() {
        let ck = Checkpoint::from_actor(&actor(), serde_json::Value::Null);
        let mut text = String::from_utf8(ck.to_bytes()).unwrap();
        let i = text.find("\"biases\": [").unwrap() + 20;
        let digit = text[i..].find(|c: char| c.is_ascii_digit() && c != '0').unwrap() + i;
        let c = text.as_bytes()[digit];
        text.replace_range(digit..=digit, if c == b'9' { "8" } else { "9" });
        assert!(matches!(
            Checkpoint::from_bytes(text.as_bytes()),
            Err(ChecksumOrVersionError::Checksum { .. })
        ));
        assert!(matches!(
            Checkpoint::from_bytes(b"{not json"),
            Err(ChecksumOrVersionError::Malformed(_))
        ));
    }

    #[test]
    fn future_version_is_rejected() {
        let mut ck = Checkpoint::from_actor(&actor(), serde_json::Value::Null);
        ck.format_version = 2;
        assert!(matches!(
            Checkpoint::from_bytes(&ck.to_bytes()),
            Err(ChecksumOrVersionError::Version { found: 2, .. })
        ));
    }
}
