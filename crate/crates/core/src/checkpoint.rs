//! Checkpoints: a JSON manifest naming every tensor with its shape and byte
//! offset, plus one flat little-endian `f32` blob.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::precnet::{count_parameters, NetworkConfig, NetworkWeights};
use crate::tensor::{Scalar, Tensor};
use crate::training::{AdamConfig, AdamState, TrainProgress};

pub const MANIFEST_FILE: &str = "checkpoint.json";
pub const BLOB_FILE: &str = "params.bin";
pub const FORMAT: &str = "precoder-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
    /// Element count.
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerManifest {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<TensorEntry>,
    pub v: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub config: NetworkConfig,
    pub parameter_count: usize,
    pub blob: String,
    pub blob_bytes: usize,
    pub tensors: Vec<TensorEntry>,
    pub optimizer: Option<OptimizerManifest>,
    pub progress: Option<TrainProgress>,
}

/// Weights plus optional optimizer state and training progress, stored in
/// single precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub weights: NetworkWeights<f32>,
    pub optimizer: Option<AdamState<f32>>,
    pub progress: Option<TrainProgress>,
}

struct BlobWriter {
    bytes: Vec<u8>,
}

impl BlobWriter {
    fn push<T: Scalar>(&mut self, name: String, t: &Tensor<T>) -> TensorEntry {
        let offset = self.bytes.len();
        for v in t.data() {
            self.bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
        TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset,
            len: t.len(),
        }
    }
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn read_entry(blob: &[u8], e: &TensorEntry, want_shape: &[usize]) -> Result<Tensor<f32>> {
    if e.shape != want_shape {
        return Err(corrupt(format!(
            "{}: shape {:?}, config expects {want_shape:?}",
            e.name, e.shape
        )));
    }
    if e.shape.iter().product::<usize>() != e.len {
        return Err(corrupt(format!("{}: len {} disagrees with shape", e.name, e.len)));
    }
    let end = e
        .len
        .checked_mul(4)
        .and_then(|b| b.checked_add(e.offset))
        .filter(|&end| end <= blob.len() && e.offset.is_multiple_of(4))
        .ok_or_else(|| corrupt(format!("{}: offset {} out of bounds", e.name, e.offset)))?;
    let data = blob[e.offset..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(e.shape.clone(), data)
}

impl Checkpoint {
    pub fn new<T: Scalar>(config: NetworkConfig, weights: &NetworkWeights<T>) -> Result<Self> {
        weights.check_against(&config)?;
        Ok(Self {
            config,
            weights: weights.cast(),
            optimizer: None,
            progress: None,
        })
    }

    pub fn with_training<T: Scalar>(mut self, adam: &AdamState<T>, progress: TrainProgress) -> Self {
        self.optimizer = Some(adam.cast());
        self.progress = Some(progress);
        self
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.parameter_count()
    }

    /// Writes `checkpoint.json` and `params.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let named = self.weights.named_tensors(self.config.variant);
        let mut blob = BlobWriter {
            bytes: Vec::with_capacity(self.parameter_count() * 4),
        };
        let tensors: Vec<TensorEntry> = named.iter().map(|(n, t)| blob.push(n.clone(), *t)).collect();
        let optimizer = self.optimizer.as_ref().map(|adam| {
            let mut moments = |prefix: &str, ts: &[Tensor<f32>]| {
                named
                    .iter()
                    .zip(ts)
                    .map(|((n, _), t)| blob.push(format!("{prefix}.{n}"), t))
                    .collect::<Vec<_>>()
            };
            let m = moments("adam_m", &adam.m);
            let v = moments("adam_v", &adam.v);
            OptimizerManifest {
                config: adam.config,
                step: adam.step,
                m,
                v,
            }
        });
        let manifest = CheckpointManifest {
            format: FORMAT.into(),
            version: VERSION,
            config: self.config.clone(),
            parameter_count: self.parameter_count(),
            blob: BLOB_FILE.into(),
            blob_bytes: blob.bytes.len(),
            tensors,
            optimizer,
            progress: self.progress.clone(),
        };
        let blob_path = dir.join(BLOB_FILE);
        fs::write(&blob_path, &blob.bytes).map_err(|e| Error::io(&blob_path, e))?;
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    /// Loads and validates a checkpoint directory.
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: CheckpointManifest = serde_json::from_str(&text)
            .map_err(|e| corrupt(format!("{}: {e}", path.display())))?;
        if manifest.format != FORMAT || manifest.version != VERSION {
            return Err(corrupt(format!(
                "unsupported format {} v{}",
                manifest.format, manifest.version
            )));
        }
        manifest.config.validate()?;
        let expected = count_parameters(&manifest.config);
        if manifest.parameter_count != expected {
            return Err(corrupt(format!(
                "manifest declares {} parameters, config has {expected}",
                manifest.parameter_count
            )));
        }
        if manifest.blob.contains(['/', '\\']) || manifest.blob == ".." {
            return Err(corrupt(format!("blob name {:?} must be a plain file name", manifest.blob)));
        }
        let blob_path = dir.join(&manifest.blob);
        let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        if blob.len() != manifest.blob_bytes {
            return Err(corrupt(format!(
                "blob has {} bytes, manifest declares {}",
                blob.len(),
                manifest.blob_bytes
            )));
        }

        let mut cursor = 0;
        let all_entries = manifest.tensors.iter().chain(
            manifest
                .optimizer
                .iter()
                .flat_map(|o| o.m.iter().chain(&o.v)),
        );
        for e in all_entries {
            if e.offset != cursor {
                return Err(corrupt(format!(
                    "{}: offset {}, expected {cursor} (entries must be contiguous)",
                    e.name, e.offset
                )));
            }
            cursor += e.len * 4;
        }
        if cursor != blob.len() {
            return Err(corrupt(format!(
                "entries cover {cursor} bytes, blob has {}",
                blob.len()
            )));
        }

        let template = NetworkWeights::<f32>::zeros(&manifest.config)?;
        let names: Vec<(String, Vec<usize>)> = template
            .named_tensors(manifest.config.variant)
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        let read_all = |entries: &[TensorEntry], prefix: &str| -> Result<Vec<Tensor<f32>>> {
            if entries.len() != names.len() {
                return Err(corrupt(format!(
                    "{} tensor entries, config has {}",
                    entries.len(),
                    names.len()
                )));
            }
            entries
                .iter()
                .zip(&names)
                .map(|(e, (n, shape))| {
                    let want = if prefix.is_empty() { n.clone() } else { format!("{prefix}.{n}") };
                    if e.name != want {
                        return Err(corrupt(format!("entry {:?}, expected {want:?}", e.name)));
                    }
                    read_entry(&blob, e, shape)
                })
                .collect()
        };

        let mut weights = template.clone();
        let loaded = read_all(&manifest.tensors, "")?;
        let total: usize = loaded.iter().map(Tensor::len).sum();
        if total != expected {
            return Err(corrupt(format!("blob holds {total} parameters, config has {expected}")));
        }
        for (dst, src) in weights.tensors_mut().into_iter().zip(loaded) {
            *dst = src;
        }
        let optimizer = match &manifest.optimizer {
            Some(o) => Some(AdamState {
                config: o.config,
                step: o.step,
                m: read_all(&o.m, "adam_m")?,
                v: read_all(&o.v, "adam_v")?,
            }),
            None => None,
        };
        Ok(Self {
            config: manifest.config,
            weights,
            optimizer,
            progress: manifest.progress,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::precnet::NetworkConfig;

    fn tiny() -> NetworkConfig {
        NetworkConfig::from_channels(3, &[2, 4], &[1.0, 0.0]).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny();
        let w = NetworkWeights::<f32>::init(&config, 5).unwrap();
        let mut adam = AdamState::new(&w.tensors(), AdamConfig::default());
        adam.step = 3;
        adam.m[0].data_mut()[0] = 0.125;
        let progress = TrainProgress {
            epochs_completed: 2,
            seed: 9,
            history: vec![],
            step_losses: vec![0.1, 0.2],
        };
        let ck = Checkpoint::new(config, &w).unwrap().with_training(&adam, progress);
        ck.save(dir.path()).unwrap();
        assert_eq!(Checkpoint::load(dir.path()).unwrap(), ck);
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny();
        let w = NetworkWeights::<f32>::init(&config, 5).unwrap();
        Checkpoint::new(config, &w).unwrap().save(dir.path()).unwrap();
        let blob = dir.path().join(BLOB_FILE);
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(Checkpoint::load(dir.path()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn tampered_manifest_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny();
        let w = NetworkWeights::<f32>::init(&config, 5).unwrap();
        Checkpoint::new(config, &w).unwrap().save(dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).unwrap();
        let m: CheckpointManifest = serde_json::from_str(&text).unwrap();
        let mut shifted = m.clone();
        shifted.tensors[1].offset += 4;
        fs::write(&path, serde_json::to_string(&shifted).unwrap()).unwrap();
        assert!(matches!(Checkpoint::load(dir.path()), Err(Error::Checkpoint(_))));

        let mut recounted = m.clone();
        recounted.parameter_count += 1;
        fs::write(&path, serde_json::to_string(&recounted).unwrap()).unwrap();
        assert!(matches!(Checkpoint::load(dir.path()), Err(Error::Checkpoint(_))));

        let mut reshaped = m;
        reshaped.tensors[0].shape[0] += 1;
        fs::write(&path, serde_json::to_string(&reshaped).unwrap()).unwrap();
        assert!(Checkpoint::load(dir.path()).is_err());

        fs::write(&path, "{ not json").unwrap();
        assert!(matches!(Checkpoint::load(dir.path()), Err(Error::Checkpoint(_))));
    }
}
