use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::CorpusError;
use crate::fusion::ModelConfig;
use crate::numkernel::{Adam, AdamConfig, ParamStore, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// Counters from which every random stream is derived.
    pub counters: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerEntry {
    pub adam: AdamConfig,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Digests {
    pub params_bin: String,
    pub opt_bin: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub model: ModelConfig,
    /// Echo of the training configuration.
    pub config: serde_json::Value,
    pub step: u64,
    pub epoch: u64,
    pub rng: RngState,
    pub vocab: Vec<String>,
    pub params: Vec<ParamEntry>,
    pub optimizer: OptimizerEntry,
    pub digests: Digests,
}

/// Everything a checkpoint records besides the arrays themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub config: serde_json::Value,
    pub step: u64,
    pub epoch: u64,
    pub rng: RngState,
    pub vocab: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: ParamStore<f32>,
    pub adam: Adam<f32>,
}

fn to_le_bytes<'a, I: Iterator<Item = &'a f32>>(values: I) -> Vec<u8> {
    values.flat_map(|v| v.to_le_bytes()).collect()
}

fn from_le_bytes(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

fn digest(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), CorpusError> {
    std::fs::write(path, bytes).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn read(path: &Path) -> Result<Vec<u8>, CorpusError> {
    std::fs::read(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Writes `params.bin`, `opt.bin` and finally `manifest.json` into `dir`.
pub fn save_checkpoint(
    dir: &Path,
    meta: &CheckpointMeta,
    params: &ParamStore<f32>,
    adam: &Adam<f32>,
) -> Result<Manifest, CorpusError> {
    std::fs::create_dir_all(dir).map_err(|source| CorpusError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let param_bytes = to_le_bytes(params.iter().flat_map(|(_, _, t)| t.data().iter()));
    let (m, v) = adam.moments();
    let opt_bytes = to_le_bytes(m.iter().chain(v).flatten());
    let manifest = Manifest {
        format_version: CHECKPOINT_VERSION,
        model: meta.model.clone(),
        config: meta.config.clone(),
        step: meta.step,
        epoch: meta.epoch,
        rng: meta.rng.clone(),
        vocab: meta.vocab.clone(),
        params: params
            .iter()
            .map(|(_, name, t)| ParamEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        optimizer: OptimizerEntry {
            adam: *adam.config(),
            step: adam.step_count(),
        },
        digests: Digests {
            params_bin: digest(&param_bytes),
            opt_bin: digest(&opt_bytes),
        },
    };
    write(&dir.join("params.bin"), &param_bytes)?;
    write(&dir.join("opt.bin"), &opt_bytes)?;
    write(
        &dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, CorpusError> {
    let bytes = read(&dir.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_slice(&bytes)?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(CorpusError::Checkpoint(format!(
            "unsupported format version {}",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

/// Loads a checkpoint, refusing payloads whose digest or size disagrees with
/// the manifest.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint, CorpusError> {
    let manifest = read_manifest(dir)?;
    let param_bytes = read(&dir.join("params.bin"))?;
    let opt_bytes = read(&dir.join("opt.bin"))?;
    if digest(&param_bytes) != manifest.digests.params_bin {
        return Err(CorpusError::DigestMismatch("params.bin".into()));
    }
    if digest(&opt_bytes) != manifest.digests.opt_bin {
        return Err(CorpusError::DigestMismatch("opt.bin".into()));
    }
    let sizes: Vec<usize> = manifest
        .params
        .iter()
        .map(|p| p.shape.iter().product())
        .collect();
    let total: usize = sizes.iter().sum();
    if param_bytes.len() != 4 * total || opt_bytes.len() != 8 * total {
        return Err(CorpusError::Checkpoint(
            "payload size does not match parameter shapes".into(),
        ));
    }
    let values = from_le_bytes(&param_bytes);
    let moments = from_le_bytes(&opt_bytes);
    let mut params = ParamStore::new();
    let mut m = Vec::with_capacity(sizes.len());
    let mut v = Vec::with_capacity(sizes.len());
    let mut offset = 0;
    for (entry, &n) in manifest.params.iter().zip(&sizes) {
        let data = values[offset..offset + n].to_vec();
        params.add(entry.name.clone(), Tensor::new(entry.shape.clone(), data)?);
        m.push(moments[offset..offset + n].to_vec());
        v.push(moments[total + offset..total + offset + n].to_vec());
        offset += n;
    }
    let adam = Adam::from_parts(manifest.optimizer.adam, manifest.optimizer.step, m, v);
    Ok(Checkpoint {
        manifest,
        params,
        adam,
    })
}
