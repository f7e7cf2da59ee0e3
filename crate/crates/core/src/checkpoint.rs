//! Directory checkpoints: `checkpoint.json` (manifest) plus `tensors.bin`
//! (little-endian tensors at the byte offsets the manifest lists).

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use autograd::{Dtype, Element, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{io_err, json_err, Error, Result};
use crate::network::{ArchitectureDescriptor, Network};
use crate::pruning::ControllerState;
use crate::rng::StreamState;
use crate::train::{Optimizer, OptimizerConfig, Slot};

pub const MAGIC: &str = "PRMSEG-CKPT";
pub const VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "checkpoint.json";
pub const BLOB_FILE: &str = "tensors.bin";

const MOMENT_M: &str = "opt.m/";
const MOMENT_V: &str = "opt.v/";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OptimizerRecord {
    pub config: OptimizerConfig,
    pub step: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub magic: String,
    pub version: u32,
    pub dtype: String,
    /// Number of completed epochs.
    pub epoch: usize,
    pub descriptor: ArchitectureDescriptor,
    pub tensors: Vec<TensorEntry>,
    pub optimizer: OptimizerRecord,
    pub controller: ControllerState,
    pub rng: StreamState,
    /// Free-form trainer bookkeeping.
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// Everything needed to continue a run bit-for-bit.
#[derive(Debug, Clone)]
pub struct Checkpoint<E> {
    pub network: Network<E>,
    pub optimizer: Optimizer<E>,
    pub controller: ControllerState,
    pub rng: StreamState,
    pub epoch: usize,
    pub extra: serde_json::Value,
}

fn push_tensor<E: Element>(blob: &mut Vec<u8>, index: &mut Vec<TensorEntry>, name: String, t: &Tensor<E>) {
    index.push(TensorEntry {
        name,
        shape: t.shape().to_vec(),
        offset: blob.len(),
    });
    for &v in t.data() {
        match E::DTYPE {
            Dtype::F32 => blob.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
            Dtype::F64 => blob.extend_from_slice(&v.as_f64().to_le_bytes()),
        }
    }
}

fn read_tensor<E: Element>(blob: &[u8], e: &TensorEntry) -> Result<Tensor<E>> {
    let numel: usize = e.shape.iter().product();
    let size = E::DTYPE.size_of();
    let end = e.offset + numel * size;
    if end > blob.len() {
        return Err(Error::Checkpoint(format!(
            "tensor {} needs bytes {}..{end} but the blob has {} bytes (truncated?)",
            e.name,
            e.offset,
            blob.len()
        )));
    }
    let bytes = &blob[e.offset..end];
    let data = match E::DTYPE {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| E::lit(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
            .collect(),
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| E::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect(),
    };
    Ok(Tensor::from_vec(&e.shape, data)?)
}

impl<E: Element> Checkpoint<E> {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let mut blob = Vec::new();
        let mut tensors = Vec::new();
        for p in self.network.params() {
            push_tensor(&mut blob, &mut tensors, p.name.clone(), &p.value);
        }
        for (name, slot) in &self.optimizer.slots {
            push_tensor(&mut blob, &mut tensors, format!("{MOMENT_M}{name}"), &slot.m);
            push_tensor(&mut blob, &mut tensors, format!("{MOMENT_V}{name}"), &slot.v);
        }
        let manifest = CheckpointManifest {
            magic: MAGIC.into(),
            version: VERSION,
            dtype: E::DTYPE.as_str().into(),
            epoch: self.epoch,
            descriptor: self.network.descriptor(),
            tensors,
            optimizer: OptimizerRecord {
                config: self.optimizer.config.clone(),
                step: self.optimizer.step,
            },
            controller: self.controller.clone(),
            rng: self.rng,
            extra: self.extra.clone(),
        };
        // blob first, so a manifest never points at a missing payload
        let blob_path = dir.join(BLOB_FILE);
        fs::write(&blob_path, &blob).map_err(io_err(&blob_path))?;
        let mpath = dir.join(MANIFEST_FILE);
        let json = serde_json::to_vec_pretty(&manifest).map_err(json_err(&mpath))?;
        fs::write(&mpath, json).map_err(io_err(&mpath))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        if manifest.dtype != E::DTYPE.as_str() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, requested {}",
                manifest.dtype,
                E::DTYPE.as_str()
            )));
        }
        let blob_path = dir.join(BLOB_FILE);
        let blob = fs::read(&blob_path).map_err(io_err(&blob_path))?;
        let expected: usize = manifest
            .tensors
            .iter()
            .map(|e| e.shape.iter().product::<usize>() * E::DTYPE.size_of())
            .sum();
        if blob.len() != expected {
            return Err(Error::Checkpoint(format!(
                "blob has {} bytes, index describes {expected} (truncated or corrupt)",
                blob.len()
            )));
        }
        let mut by_name: HashMap<&str, &TensorEntry> = HashMap::new();
        for e in &manifest.tensors {
            if by_name.insert(e.name.as_str(), e).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor {}", e.name)));
            }
        }

        let mut network = Network::<E>::from_descriptor(&manifest.descriptor, 0)
            .map_err(|e| Error::Checkpoint(format!("bad architecture descriptor: {e}")))?;
        let mut used = 0;
        for p in network.params_mut() {
            let entry = by_name
                .get(p.name.as_str())
                .ok_or_else(|| Error::Checkpoint(format!("descriptor needs {} but the checkpoint lacks it", p.name)))?;
            if entry.shape != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "{}: stored shape {:?}, descriptor implies {:?}",
                    p.name,
                    entry.shape,
                    p.value.shape()
                )));
            }
            p.value = read_tensor(&blob, entry)?;
            used += 1;
        }

        let mut slots = BTreeMap::new();
        for e in &manifest.tensors {
            if let Some(name) = e.name.strip_prefix(MOMENT_M) {
                let v = by_name
                    .get(format!("{MOMENT_V}{name}").as_str())
                    .ok_or_else(|| Error::Checkpoint(format!("first moment of {name} without a second")))?;
                slots.insert(
                    name.to_string(),
                    Slot {
                        m: read_tensor(&blob, e)?,
                        v: read_tensor(&blob, v)?,
                    },
                );
            }
        }
        let stray = manifest.tensors.len() - used - 2 * slots.len();
        if stray != 0 {
            return Err(Error::Checkpoint(format!(
                "{stray} stored tensors do not belong to the described architecture"
            )));
        }
        let mut optimizer = Optimizer::new(manifest.optimizer.config.clone())?;
        optimizer.step = manifest.optimizer.step;
        optimizer.slots = slots;

        Ok(Self {
            network,
            optimizer,
            controller: manifest.controller,
            rng: manifest.rng,
            epoch: manifest.epoch,
            extra: manifest.extra,
        })
    }
}

/// Reads and version-checks the manifest without touching the blob.
pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read(&mpath).map_err(io_err(&mpath))?;
    let value: serde_json::Value = serde_json::from_slice(&text).map_err(json_err(&mpath))?;
    let magic = value.get("magic").and_then(|v| v.as_str());
    if magic != Some(MAGIC) {
        return Err(Error::Checkpoint(format!(
            "{}: magic {magic:?}, expected {MAGIC:?}",
            mpath.display()
        )));
    }
    let version = value.get("version").and_then(|v| v.as_u64());
    if version != Some(VERSION as u64) {
        return Err(Error::Checkpoint(format!(
            "{}: version {version:?}, this build reads {VERSION}",
            mpath.display()
        )));
    }
    serde_json::from_value(value).map_err(json_err(&mpath))
}
