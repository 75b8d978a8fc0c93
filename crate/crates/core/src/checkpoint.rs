//! Self-describing checkpoint container.
//!
//! ```text
//! magic   8 bytes  "HRMYCKPT"
//! version u32 LE
//! hlen    u64 LE   length of the JSON header
//! header  hlen bytes of JSON (config, stage, counters, tensor index)
//! data    f32 LE values of every tensor, in index order
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{HarmonyModel, ModelConfig, StageTag};
use crate::nn::{Adam, Tensor};

pub const CKPT_MAGIC: &[u8; 8] = b"HRMYCKPT";
pub const CKPT_VERSION: u32 = 1;

const MOMENT_M: &str = "@adam.m/";
const MOMENT_V: &str = "@adam.v/";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 4],
    offset: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct OptimizerState {
    lr: f64,
    step: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    stage: StageTag,
    config: ModelConfig,
    config_hash: String,
    step: u64,
    seed: u64,
    optimizer: Option<OptimizerState>,
    notes: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub stage: StageTag,
    /// Training steps taken in the stage that wrote this checkpoint.
    pub step: u64,
    pub seed: u64,
    pub model: HarmonyModel<f32>,
    pub optimizer: Option<Adam<f32>>,
    /// Free-form provenance (training config, source checkpoints).
    pub notes: BTreeMap<String, String>,
}

/// SHA-256 of the canonical JSON of a model config.
pub fn config_hash(config: &ModelConfig) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(config).expect("config serializes")))
}

impl Checkpoint {
    pub fn new(stage: StageTag, model: HarmonyModel<f32>, seed: u64) -> Self {
        Self { stage, step: 0, seed, model, optimizer: None, notes: BTreeMap::new() }
    }

    pub fn config_hash(&self) -> String {
        config_hash(&self.model.config)
    }

    /// SHA-256 over parameter names, shapes and values.
    pub fn weights_hash(&self) -> String {
        let mut h = Sha256::new();
        for (_, p) in self.model.store.iter() {
            h.update(p.name.as_bytes());
            for d in p.value.shape {
                h.update((d as u64).to_le_bytes());
            }
            for v in &p.value.data {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors = Vec::new();
        let mut data: Vec<f32> = Vec::new();
        let mut push = |name: String, t: &Tensor<f32>| {
            tensors.push(TensorEntry { name, shape: t.shape, offset: data.len() });
            data.extend_from_slice(&t.data);
        };
        for (_, p) in self.model.store.iter() {
            push(p.name.clone(), &p.value);
        }
        if let Some(opt) = &self.optimizer {
            for (id, (m, v)) in opt.moments() {
                let name = &self.model.store.get(*id).name;
                push(format!("{MOMENT_M}{name}"), m);
                push(format!("{MOMENT_V}{name}"), v);
            }
        }
        let header = Header {
            stage: self.stage,
            config: self.model.config.clone(),
            config_hash: self.config_hash(),
            step: self.step,
            seed: self.seed,
            optimizer: self.optimizer.as_ref().map(|o| OptimizerState { lr: o.lr, step: o.steps_taken() }),
            notes: self.notes.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + 4 * data.len());
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for v in data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 20 || &bytes[..8] != CKPT_MAGIC {
            return Err(bad("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CKPT_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(format!("header: {e}")))?;
        if header.config_hash != config_hash(&header.config) {
            return Err(bad("config hash does not match config".into()));
        }
        let raw = &bytes[20 + hlen..];
        if !raw.len().is_multiple_of(4) {
            return Err(bad("data section not a whole number of f32 values".into()));
        }
        let values: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();

        let mut model = HarmonyModel::<f32>::new(&header.config, 0)?;
        let mut moments = BTreeMap::new();
        let mut pending: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        let mut seen = 0usize;
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let slice = values.get(e.offset..e.offset + n).ok_or_else(|| bad(format!("tensor {} out of range", e.name)))?;
            let t = Tensor::from_vec(e.shape, slice.to_vec());
            if e.name.starts_with('@') {
                pending.insert(e.name.clone(), t);
                continue;
            }
            let id = model.store.id(&e.name).ok_or_else(|| bad(format!("unknown tensor {}", e.name)))?;
            if model.store.value(id).shape != e.shape {
                return Err(Error::shape(model.store.value(id).shape, e.shape));
            }
            *model.store.value_mut(id) = t;
            seen += 1;
        }
        if seen != model.store.len() {
            return Err(bad(format!("expected {} tensors, found {seen}", model.store.len())));
        }
        let optimizer = match header.optimizer {
            Some(o) => {
                for (id, p) in model.store.iter() {
                    let m = pending.remove(&format!("{MOMENT_M}{}", p.name));
                    let v = pending.remove(&format!("{MOMENT_V}{}", p.name));
                    if let (Some(m), Some(v)) = (m, v) {
                        moments.insert(id, (m, v));
                    }
                }
                Some(Adam::restore(o.lr, o.step, moments))
            }
            None => None,
        };
        Ok(Self { stage: header.stage, step: header.step, seed: header.seed, model, optimizer, notes: header.notes })
    }

    /// Writes via a temporary file and rename.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn require_stage(&self, allowed: &[StageTag]) -> Result<()> {
        if allowed.contains(&self.stage) {
            Ok(())
        } else {
            let names: Vec<&str> = allowed.iter().map(StageTag::as_str).collect();
            Err(Error::StageMismatch(format!("checkpoint is {}, expected one of {}", self.stage, names.join(", "))))
        }
    }
}
