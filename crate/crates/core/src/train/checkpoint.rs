//! Checkpoint container: a single-line JSON manifest, a newline, then every
//! parameter tensor as little-endian `f32` in manifest order.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EpochMetrics, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

pub const CHECKPOINT_FORMAT: &str = "mulcpred-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// 128-bit word position as a decimal string.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bytes = hex::decode(&self.seed).map_err(|e| Error::Config(format!("bad rng seed: {e}")))?;
        let seed: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::Config("rng seed must be 32 bytes".into()))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Config("bad rng word position".into()))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub train_config: TrainConfig,
    pub epoch: usize,
    pub rng: RngState,
    pub loss_history: Vec<EpochMetrics>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    model_config: ModelConfig,
    train_config: TrainConfig,
    epoch: usize,
    rng: RngState,
    loss_history: Vec<EpochMetrics>,
    tensors: Vec<TensorEntry>,
}

#[derive(Deserialize)]
struct VersionProbe {
    format: Option<String>,
    version: Option<u32>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let params = self.model.params();
        let manifest = Manifest {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model_config: self.model.config().clone(),
            train_config: self.train_config.clone(),
            epoch: self.epoch,
            rng: self.rng.clone(),
            loss_history: self.loss_history.clone(),
            tensors: params
                .iter()
                .map(|p| TensorEntry {
                    name: p.name.clone(),
                    len: p.data.len(),
                })
                .collect(),
        };
        let mut out = serde_json::to_vec(&manifest).expect("manifest serializes");
        out.push(b'\n');
        for p in &params {
            for v in p.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Parses a checkpoint, rebuilding the model from its stored config.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::parse(bytes, None)
    }

    /// Parses a checkpoint and checks it against `expected`; any tensor
    /// whose name or size differs is listed in the error.
    pub fn from_bytes_for(bytes: &[u8], expected: &ModelConfig) -> Result<Self> {
        Self::parse(bytes, Some(expected))
    }

    fn parse(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<Self> {
        let newline = bytes.iter().position(|&b| b == b'\n').ok_or(Error::Format {
            offset: bytes.len() as u64,
            message: "checkpoint manifest line is not terminated".into(),
        })?;
        let head = &bytes[..newline];
        let probe: VersionProbe = serde_json::from_slice(head).map_err(|e| Error::Format {
            offset: e.column().saturating_sub(1) as u64,
            message: format!("malformed checkpoint manifest: {e}"),
        })?;
        if probe.format.as_deref() != Some(CHECKPOINT_FORMAT) {
            return Err(Error::Incompatible(format!(
                "not a checkpoint (format {:?})",
                probe.format
            )));
        }
        if probe.version != Some(CHECKPOINT_VERSION) {
            return Err(Error::Incompatible(format!(
                "checkpoint version {:?} is not supported (expected {CHECKPOINT_VERSION})",
                probe.version
            )));
        }
        let manifest: Manifest = serde_json::from_slice(head).map_err(|e| Error::Format {
            offset: e.column().saturating_sub(1) as u64,
            message: format!("malformed checkpoint manifest: {e}"),
        })?;

        let target = expected.unwrap_or(&manifest.model_config);
        let mut model = Model::<f32>::zeros(target.clone())?;
        {
            let slots = model.params();
            let mut problems = Vec::new();
            for (i, slot) in slots.iter().enumerate() {
                match manifest.tensors.get(i) {
                    Some(e) if e.name == slot.name && e.len == slot.data.len() => {}
                    Some(e) if e.name == slot.name => problems.push(format!(
                        "{}: expected {} values, checkpoint has {}",
                        slot.name,
                        slot.data.len(),
                        e.len
                    )),
                    Some(e) => problems.push(format!("{}: checkpoint has {} here", slot.name, e.name)),
                    None => problems.push(format!("{}: missing from checkpoint", slot.name)),
                }
            }
            for e in manifest.tensors.iter().skip(slots.len()) {
                problems.push(format!("{}: not present in the model", e.name));
            }
            if !problems.is_empty() {
                return Err(Error::Incompatible(format!(
                    "tensor shape mismatch: {}",
                    problems.join("; ")
                )));
            }
        }
        let payload = &bytes[newline + 1..];
        let expected_bytes: usize = manifest.tensors.iter().map(|e| e.len * 4).sum();
        if payload.len() != expected_bytes {
            return Err(Error::Format {
                offset: (newline + 1) as u64,
                message: format!(
                    "checkpoint payload expects {expected_bytes} bytes, found {}",
                    payload.len()
                ),
            });
        }
        let mut cursor = 0;
        for slot in model.params_mut() {
            for v in slot.data.iter_mut() {
                let c = &payload[cursor..cursor + 4];
                *v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
                cursor += 4;
            }
        }
        Ok(Self {
            model,
            train_config: manifest.train_config,
            epoch: manifest.epoch,
            rng: manifest.rng,
            loss_history: manifest.loss_history,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn load_for(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes_for(&bytes, expected)
    }

    /// Saves to `path` and loads it back.
    pub fn roundtrip(&self, path: &Path) -> Result<Self> {
        self.save(path)?;
        Self::load(path)
    }
}
