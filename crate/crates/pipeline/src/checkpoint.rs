//! Checkpoints: a JSON manifest plus one flat little-endian `f64` payload.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use featsplat::nn::ParamStore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::model::Model;

pub const MANIFEST: &str = "manifest.json";
pub const PAYLOAD: &str = "params.bin";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in values.
    pub offset: usize,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    /// Training stage that wrote the checkpoint.
    pub stage: String,
    /// Module prefixes present, e.g. `bb`, `dd`, `rf`.
    pub modules: Vec<String>,
    pub tensors: Vec<TensorEntry>,
    pub config: PipelineConfig,
    /// SHA-256 of the payload, hex encoded.
    pub content_hash: String,
}

pub struct Checkpoint {
    pub manifest: Manifest,
    pub values: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Payload bytes and manifest entries for every tensor of `ps`, in name order.
pub fn encode(ps: &ParamStore) -> (Vec<u8>, Vec<TensorEntry>) {
    let mut bytes = Vec::with_capacity(ps.num_scalars() * 8);
    let mut entries = Vec::with_capacity(ps.len());
    let mut offset = 0;
    for (name, t) in ps.iter() {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
            frozen: ps.is_frozen(name),
        });
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        offset += t.numel();
    }
    (bytes, entries)
}

/// Hash of a parameter store's values, for checking that a module was not touched.
pub fn params_hash(ps: &ParamStore) -> String {
    sha256_hex(&encode(ps).0)
}

pub fn save(dir: &Path, model: &Model, stage: &str) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (bytes, tensors) = encode(&model.ps);
    let mut modules: Vec<String> = tensors
        .iter()
        .filter_map(|t| t.name.split('.').next().map(str::to_string))
        .collect();
    modules.dedup();
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        stage: stage.to_string(),
        modules,
        tensors,
        config: model.cfg.clone(),
        content_hash: sha256_hex(&bytes),
    };
    let payload = dir.join(PAYLOAD);
    fs::write(&payload, &bytes).map_err(|e| Error::io(&payload, e))?;
    let mpath = dir.join(MANIFEST);
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

impl Checkpoint {
    /// Reads and verifies a checkpoint directory.
    pub fn read(dir: &Path) -> Result<Checkpoint> {
        let mpath = dir.join(MANIFEST);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", mpath.display())))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::Manifest(format!(
                "format version {} is not {FORMAT_VERSION}",
                manifest.format_version
            )));
        }
        let ppath = dir.join(PAYLOAD);
        let bytes = fs::read(&ppath).map_err(|e| Error::io(&ppath, e))?;
        let hash = sha256_hex(&bytes);
        if hash != manifest.content_hash {
            return Err(Error::Manifest(format!(
                "payload hash {hash} does not match manifest {}",
                manifest.content_hash
            )));
        }
        if bytes.len() % 8 != 0 {
            return Err(Error::Manifest("payload is not a whole number of f64 values".into()));
        }
        let flat: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let mut values = BTreeMap::new();
        for t in &manifest.tensors {
            let n: usize = t.shape.iter().product();
            let end = t.offset + n;
            if end > flat.len() {
                return Err(Error::Manifest(format!("tensor {} runs past the payload", t.name)));
            }
            values.insert(t.name.clone(), (t.shape.clone(), flat[t.offset..end].to_vec()));
        }
        Ok(Checkpoint { manifest, values })
    }

    /// Copies every parameter of `ps` whose name starts with one of
    /// `prefixes` from the checkpoint. Missing or reshaped tensors are errors.
    pub fn apply(&self, ps: &mut ParamStore, prefixes: &[&str]) -> Result<usize> {
        let names: Vec<String> = ps
            .names()
            .filter(|n| prefixes.iter().any(|p| n.starts_with(p)))
            .cloned()
            .collect();
        for n in &names {
            let (shape, data) = self
                .values
                .get(n)
                .ok_or_else(|| Error::Manifest(format!("checkpoint has no tensor {n}")))?;
            if shape.as_slice() != ps.get(n)?.shape() {
                return Err(Error::Manifest(format!(
                    "tensor {n} has shape {shape:?} in the checkpoint, {:?} in the model",
                    ps.get(n)?.shape()
                )));
            }
            ps.set(n, data.clone())?;
        }
        Ok(names.len())
    }

    /// Model built from the stored configuration with every tensor restored.
    pub fn model(&self) -> Result<Model> {
        let mut model = Model::new(&self.manifest.config)?;
        self.apply(&mut model.ps, &[""])?;
        Ok(model)
    }
}

pub fn load(dir: &Path) -> Result<Model> {
    Checkpoint::read(dir)?.model()
}
