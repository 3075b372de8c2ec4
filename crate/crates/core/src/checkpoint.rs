//! On-disk model state: `manifest.json` plus one little-endian f32 blob per
//! parameter tensor, named `<layer>.<role>.bin`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::{Layer, ModelGraph, Network, ParamKind};
use crate::tensor::Scalar;
use crate::training::Precision;

pub const MANIFEST: &str = "manifest.json";
const FORMAT: &str = "refconv-checkpoint/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Baseline,
    Refconv,
    Merged,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Baseline => "baseline",
            Stage::Refconv => "refconv",
            Stage::Merged => "merged",
        }
    }

    /// Errors unless `self` is one of `allowed`.
    pub fn require(self, allowed: &[Stage]) -> Result<()> {
        if allowed.contains(&self) {
            Ok(())
        } else {
            Err(Error::Stage {
                expected: allowed.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(" or "),
                found: self.as_str().into(),
            })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Trainable,
    Frozen,
    Buffer,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub file: String,
    pub layer: String,
    pub role: String,
    pub kind: TensorKind,
    pub dims: [usize; 4],
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub model_id: String,
    pub stage: Stage,
    /// Precision the network was trained in; blobs are always f32.
    pub precision: Precision,
    pub seed: u64,
    pub graph: ModelGraph,
    pub tensors: Vec<TensorEntry>,
    /// Free-form provenance (metrics, source checkpoint, data fingerprint).
    pub metadata: BTreeMap<String, serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub network: Network<f32>,
}

fn encode(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn has_refconv<T: Scalar>(net: &Network<T>) -> bool {
    net.layers().iter().any(|l| matches!(l, Layer::RefConv(_)))
}

impl Checkpoint {
    /// Snapshot of `net` (converted to f32). `Refconv` is required exactly when
    /// the network has refocusing layers.
    pub fn new<T: Scalar>(net: &Network<T>, stage: Stage, precision: Precision, seed: u64) -> Result<Self> {
        let is_rc = has_refconv(net);
        if is_rc != (stage == Stage::Refconv) {
            return Err(Error::Stage {
                expected: if is_rc { "refconv" } else { "baseline or merged" }.into(),
                found: stage.as_str().into(),
            });
        }
        let network = net.cast::<f32>()?;
        let tensors = network
            .params()
            .into_iter()
            .map(|(info, data)| {
                let bytes = encode(data);
                TensorEntry {
                    file: format!("{}.bin", info.key()),
                    layer: info.layer_name.clone(),
                    role: info.role.into(),
                    kind: match info.kind {
                        ParamKind::Trainable { .. } => TensorKind::Trainable,
                        ParamKind::Frozen => TensorKind::Frozen,
                        ParamKind::Buffer => TensorKind::Buffer,
                    },
                    dims: info.dims,
                    bytes: bytes.len() as u64,
                    sha256: sha256_hex(&bytes),
                }
            })
            .collect();
        let manifest = Manifest {
            format: FORMAT.into(),
            model_id: network.graph().model_id.clone(),
            stage,
            precision,
            seed,
            graph: network.graph().clone(),
            tensors,
            metadata: BTreeMap::new(),
        };
        Ok(Checkpoint { manifest, network })
    }

    pub fn with_metadata(mut self, key: &str, value: impl Serialize) -> Result<Self> {
        self.manifest.metadata.insert(key.into(), serde_json::to_value(value)?);
        Ok(self)
    }

    pub fn stage(&self) -> Stage {
        self.manifest.stage
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for ((_, data), entry) in self.network.params().into_iter().zip(&self.manifest.tensors) {
            fs::write(dir.join(&entry.file), encode(data))?;
        }
        fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&self.manifest)? + "\n")?;
        Ok(())
    }

    /// Reads and verifies a checkpoint: manifest entries must line up with the
    /// graph's parameters, and every blob must match its length and hash.
    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(MANIFEST))
            .map_err(|e| Error::CheckpointFormat(format!("{}: {e}", dir.join(MANIFEST).display())))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::CheckpointFormat(format!("manifest: {e}")))?;
        if manifest.format != FORMAT {
            return Err(Error::CheckpointFormat(format!("unsupported format `{}`", manifest.format)));
        }
        let mut network = Network::<f32>::zeroed(manifest.graph.clone())?;
        if has_refconv(&network) != (manifest.stage == Stage::Refconv) {
            return Err(Error::CheckpointMismatch(format!("stage `{}` does not match the graph", manifest.stage.as_str())));
        }
        let infos = network.param_infos();
        if infos.len() != manifest.tensors.len() {
            return Err(Error::CheckpointMismatch(format!(
                "manifest lists {} tensors, graph has {}",
                manifest.tensors.len(),
                infos.len()
            )));
        }
        let mut blobs = Vec::with_capacity(infos.len());
        for (info, entry) in infos.iter().zip(&manifest.tensors) {
            if entry.layer != info.layer_name || entry.role != info.role || entry.dims != info.dims {
                return Err(Error::CheckpointMismatch(format!(
                    "entry `{}.{}` {:?} does not match `{}` {:?}",
                    entry.layer,
                    entry.role,
                    entry.dims,
                    info.key(),
                    info.dims
                )));
            }
            let bytes = fs::read(dir.join(&entry.file)).map_err(|e| Error::CheckpointFormat(format!("{}: {e}", entry.file)))?;
            let expected = info.dims.iter().product::<usize>() * 4;
            if bytes.len() != expected || entry.bytes != expected as u64 {
                return Err(Error::CheckpointFormat(format!(
                    "{}: {} bytes on disk, {} declared, {expected} expected",
                    entry.file,
                    bytes.len(),
                    entry.bytes
                )));
            }
            if sha256_hex(&bytes) != entry.sha256 {
                return Err(Error::CheckpointFormat(format!("{}: content hash mismatch", entry.file)));
            }
            blobs.push(bytes);
        }
        let mut i = 0;
        network.visit_params_mut(|_, dst| {
            for (d, chunk) in dst.iter_mut().zip(blobs[i].chunks_exact(4)) {
                *d = f32::from_le_bytes(chunk.try_into().expect("4-byte chunk"));
            }
            i += 1;
            Ok(())
        })?;
        Ok(Checkpoint { manifest, network })
    }
}
