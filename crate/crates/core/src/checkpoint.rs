//! Bit-exact binary checkpoints.
//!
//! Layout: magic `PQFT`, little-endian u32 format version, u64 header
//! length, a JSON header (configs, step counters, RNG position, metrics
//! history), then a manifest of named tensors, each as name, u32 rank,
//! u32 dims, and little-endian f32 data. Every field serializes
//! deterministically, so save -> load -> save reproduces identical bytes.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::{Adapter, AdapterConfig, AdapterError};
use crate::model::{init_weights, ModelConfig, ModelError, ModelWeights};
use crate::tensor::Tensor;
use crate::trainer::StepRecord;

pub const MAGIC: &[u8; 4] = b"PQFT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint format version {found} unsupported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("tensor {name}: shape {found:?} does not match expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint is missing tensor {0}")]
    MissingTensor(String),
    #[error("checkpoint contains unknown tensor {0}")]
    UnknownTensor(String),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Optimizer moments in name order plus the step counter.
#[derive(Debug, Clone, Default)]
pub struct OptimizerSnapshot {
    pub step: u64,
    pub slots: Vec<(String, Vec<f32>, Vec<f32>)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    model_config: ModelConfig,
    adapter_config: AdapterConfig,
    step: u64,
    optimizer_step: u64,
    rng_seed: u64,
    /// u128 stream position, decimal-encoded for JSON friendliness.
    rng_word_pos: String,
    metrics: Vec<StepRecord>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub version: u32,
    pub model_config: ModelConfig,
    pub base: ModelWeights<f32>,
    pub adapter: Adapter<f32>,
    pub optimizer: OptimizerSnapshot,
    /// Optimizer steps completed when this snapshot was taken.
    pub step: u64,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
    pub metrics: Vec<StepRecord>,
}

fn push_tensor(out: &mut Vec<u8>, name: &str, tensor: &Tensor<f32>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            model_config: self.model_config.clone(),
            adapter_config: self.adapter.config(),
            step: self.step,
            optimizer_step: self.optimizer.step,
            rng_seed: self.rng_seed,
            rng_word_pos: self.rng_word_pos.to_string(),
            metrics: self.metrics.clone(),
        };
        let header_json = serde_json::to_vec(&header).expect("header serializes");

        let mut tensors: Vec<(String, Tensor<f32>)> = Vec::new();
        for (name, t) in self.base.named_params() {
            tensors.push((format!("base.{name}"), t.clone()));
        }
        for (name, t) in self.adapter.named_params() {
            tensors.push((name, t.clone()));
        }
        for (name, m, v) in &self.optimizer.slots {
            let len = m.len();
            tensors.push((
                format!("optim.{name}.m"),
                Tensor::new(vec![len], m.clone()).expect("moment tensor"),
            ));
            let len = v.len();
            tensors.push((
                format!("optim.{name}.v"),
                Tensor::new(vec![len], v.clone()).expect("moment tensor"),
            ));
        }

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_json);
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, tensor) in &tensors {
            push_tensor(&mut out, name, tensor);
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(CheckpointError::Corrupt("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let header_len = r.u64()? as usize;
        let header_bytes = r.take(header_len)?;
        let header: Header = serde_json::from_slice(header_bytes)
            .map_err(|e| CheckpointError::Corrupt(format!("header: {e}")))?;
        let rng_word_pos: u128 = header
            .rng_word_pos
            .parse()
            .map_err(|_| CheckpointError::Corrupt("rng position not a number".into()))?;

        let count = r.u32()? as usize;
        let mut manifest: Vec<(String, Tensor<f32>)> = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| CheckpointError::Corrupt("tensor name not utf-8".into()))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 4)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let tensor = Tensor::new(shape, data)
                .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            manifest.push((name, tensor));
        }
        if r.pos != bytes.len() {
            return Err(CheckpointError::Corrupt("trailing bytes".into()));
        }

        // Rebuild structures and fill them from the manifest, validating
        // shapes in manifest order.
        let mut lookup: std::collections::BTreeMap<&str, &Tensor<f32>> =
            manifest.iter().map(|(n, t)| (n.as_str(), t)).collect();

        let mut base = init_weights::<f32>(&header.model_config, 0)?;
        let mut take = |name: String, target: &mut Tensor<f32>| -> Result<(), CheckpointError> {
            let found = lookup
                .remove(name.as_str())
                .ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
            if found.shape() != target.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    name,
                    expected: target.shape().to_vec(),
                    found: found.shape().to_vec(),
                });
            }
            let rg = target.requires_grad();
            *target = found.clone();
            target.set_requires_grad(rg);
            Ok(())
        };
        for (name, t) in base.named_params_mut() {
            take(format!("base.{name}"), t)?;
        }
        let mut adapter = Adapter::<f32>::init(&header.adapter_config, &header.model_config, 0)?;
        for (name, t) in adapter.named_params_mut() {
            take(name, t)?;
        }

        // whatever remains must be optimizer moments
        let mut moments: std::collections::BTreeMap<String, (Option<Vec<f32>>, Option<Vec<f32>>)> =
            std::collections::BTreeMap::new();
        for (name, tensor) in lookup {
            let rest = name
                .strip_prefix("optim.")
                .ok_or_else(|| CheckpointError::UnknownTensor(name.to_string()))?;
            if let Some(param) = rest.strip_suffix(".m") {
                moments.entry(param.to_string()).or_default().0 = Some(tensor.data().to_vec());
            } else if let Some(param) = rest.strip_suffix(".v") {
                moments.entry(param.to_string()).or_default().1 = Some(tensor.data().to_vec());
            } else {
                return Err(CheckpointError::UnknownTensor(name.to_string()));
            }
        }
        let mut slots = Vec::with_capacity(moments.len());
        for (param, (m, v)) in moments {
            let m = m.ok_or_else(|| CheckpointError::MissingTensor(format!("optim.{param}.m")))?;
            let v = v.ok_or_else(|| CheckpointError::MissingTensor(format!("optim.{param}.v")))?;
            slots.push((param, m, v));
        }

        Ok(Checkpoint {
            version,
            model_config: header.model_config,
            base,
            adapter,
            optimizer: OptimizerSnapshot {
                step: header.optimizer_step,
                slots,
            },
            step: header.step,
            rng_seed: header.rng_seed,
            rng_word_pos,
            metrics: header.metrics,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Corrupt(format!(
                "truncated: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        let mut buf = [0u8; 4];
        self.take(4)?.read_exact(&mut buf)?;
        Ok(u32::from_le_bytes(buf))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        let mut buf = [0u8; 8];
        self.take(8)?.read_exact(&mut buf)?;
        Ok(u64::from_le_bytes(buf))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::LoraConfig;

    fn sample_checkpoint() -> Checkpoint {
        let model_config = ModelConfig {
            n_layers: 1,
            n_heads: 2,
            d_model: 8,
            d_ff: 16,
            vocab_size: 11,
            max_seq_len: 12,
        };
        let base = init_weights::<f32>(&model_config, 42).unwrap();
        let adapter_cfg = AdapterConfig::Lora(LoraConfig {
            rank: 2,
            alpha: 4.0,
            ..LoraConfig::default()
        });
        let adapter = Adapter::init(&adapter_cfg, &model_config, 7).unwrap();
        let slots = adapter
            .named_params()
            .iter()
            .map(|(n, t)| {
                (
                    n.clone(),
                    vec![0.25f32; t.numel()],
                    vec![0.5f32; t.numel()],
                )
            })
            .collect();
        Checkpoint {
            version: FORMAT_VERSION,
            model_config,
            base,
            adapter,
            optimizer: OptimizerSnapshot { step: 3, slots },
            step: 3,
            rng_seed: 9,
            rng_word_pos: 123456789012345678901234567890u128,
            metrics: vec![StepRecord {
                step: 1,
                lr: 2.5e-5,
                train_loss: 5.25,
                val_accuracy: Some(0.5),
                val_macro_f1: Some(0.25),
            }],
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ckpt = sample_checkpoint();
        let bytes = ckpt.to_bytes();
        let loaded = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(loaded.to_bytes(), bytes);
        assert_eq!(loaded.rng_word_pos, ckpt.rng_word_pos);
        assert_eq!(loaded.metrics, ckpt.metrics);
        assert_eq!(loaded.base.content_hash(), ckpt.base.content_hash());
    }

    #[test]
    fn truncated_file_is_a_corrupt_error() {
        let bytes = sample_checkpoint().to_bytes();
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            let err = Checkpoint::from_bytes(&bytes[..cut]).unwrap_err();
            assert!(
                matches!(err, CheckpointError::Corrupt(_)),
                "cut {cut} gave {err:?}"
            );
        }
    }

    #[test]
    fn version_mismatch_is_distinct() {
        let mut bytes = sample_checkpoint().to_bytes();
        bytes[4] = 99;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes).unwrap_err(),
            CheckpointError::VersionMismatch { found: 99, .. }
        ));
    }

    #[test]
    fn config_mismatch_names_first_offending_tensor() {
        let ckpt = sample_checkpoint();
        let mut bytes = ckpt.to_bytes();
        // grow d_model in the header so every tensor shape disagrees
        let json_start = 4 + 4 + 8;
        let header_len =
            u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header_text =
            String::from_utf8(bytes[json_start..json_start + header_len].to_vec()).unwrap();
        let patched = header_text.replace("\"d_model\":8", "\"d_model\":4");
        assert_ne!(header_text, patched);
        bytes.splice(json_start..json_start + header_len, patched.bytes());
        let new_len = patched.len() as u64;
        bytes[8..16].copy_from_slice(&new_len.to_le_bytes());

        match Checkpoint::from_bytes(&bytes).unwrap_err() {
            CheckpointError::ShapeMismatch { name, .. } => {
                assert_eq!(name, "base.token_embedding");
            }
            other => panic!("unexpected error {other:?}"),
        }
    }
}
