//! Checkpoint file: a JSON header, one NUL byte, then every parameter as
//! little-endian `f32` in layout order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ModelError};

const FORMAT: &str = "pedalcw-checkpoint";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    step: u64,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    /// Optimizer steps taken before saving.
    pub step: u64,
}

fn bad(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let layout = self.model.layout();
        let header = Header {
            format: FORMAT.into(),
            version: VERSION,
            step: self.step,
            config: self.model.config().clone(),
            tensors: layout
                .tensors
                .iter()
                .map(|t| TensorEntry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                })
                .collect(),
        };
        let mut out = serde_json::to_vec(&header).expect("header serializes");
        out.push(0);
        out.reserve(4 * layout.total);
        for &w in self.model.weights() {
            out.extend_from_slice(&(w as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let split = bytes
            .iter()
            .position(|&b| b == 0)
            .ok_or_else(|| bad("missing header terminator"))?;
        let header: Header =
            serde_json::from_slice(&bytes[..split]).map_err(|e| bad(format!("header: {e}")))?;
        if header.format != FORMAT || header.version != VERSION {
            return Err(bad(format!(
                "unsupported format {} v{}",
                header.format, header.version
            )));
        }
        header.config.validate()?;
        let layout = super::Layout::new(&header.config);
        let matches = header.tensors.len() == layout.tensors.len()
            && header
                .tensors
                .iter()
                .zip(&layout.tensors)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape);
        if !matches {
            return Err(bad(
                "tensor table does not match the configured architecture",
            ));
        }
        let payload = &bytes[split + 1..];
        if payload.len() != 4 * layout.total {
            return Err(bad(format!(
                "payload has {} bytes, expected {}",
                payload.len(),
                4 * layout.total
            )));
        }
        let weights: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4-byte chunk"))))
            .collect();
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(bad("non-finite parameter"));
        }
        Ok(Self {
            model: Model::from_parts(header.config, weights),
            step: header.step,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EmbedWidths;

    fn small() -> Model {
        Model::new(ModelConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            ff_width: 8,
            context: 8,
            embed: EmbedWidths {
                family: 2,
                position: 2,
                tempo: 2,
                chord: 2,
                pedal: 2,
                pitch: 2,
                duration: 2,
            },
            dropout: 0.0,
            seed: 2,
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = Checkpoint {
            model: small(),
            step: 42,
        };
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back.step, 42);
        assert_eq!(back.model.config(), ck.model.config());
        assert_eq!(back.model.weights(), ck.model.weights());
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = Checkpoint {
            model: small(),
            step: 0,
        }
        .to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"{}").is_err());
        let split = bytes.iter().position(|&b| b == 0).unwrap();
        let mut other = String::from_utf8(bytes[..split].to_vec()).unwrap();
        other = other.replace("\"d_model\":8", "\"d_model\":16");
        let mut forged = other.into_bytes();
        forged.extend_from_slice(&bytes[split..]);
        assert!(matches!(
            Checkpoint::from_bytes(&forged),
            Err(ModelError::Checkpoint(_))
        ));
    }
}
