//! On-disk checkpoint directory.
//!
//! `manifest.json` lists every tensor as `{name, shape, offset}` (offset in
//! bytes) and `tensors.bin` holds their little-endian `f32` values,
//! row-major, concatenated in manifest order. Network tensors are stored as
//! `<tag>/param/<name>`, `<tag>/buffer/<name>`, `<tag>/adam.m/<name>`,
//! `<tag>/adam.v/<name>` and `<tag>/adam.t`.

use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::adam::AdamState;
use crate::error::{Error, Result};
use crate::params::Parameters;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATA_FILE: &str = "tensors.bin";
const FORMAT: &str = "bssgan-checkpoint-v1";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    fingerprints: IndexMap<String, String>,
    metadata: serde_json::Value,
    tensors: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    /// Architecture fingerprint per network tag.
    pub fingerprints: IndexMap<String, String>,
    pub metadata: serde_json::Value,
    pub tensors: IndexMap<String, Tensor<f32>>,
}

impl Checkpoint {
    pub fn new(metadata: serde_json::Value) -> Self {
        Checkpoint { metadata, ..Default::default() }
    }

    /// Store a network's weights, buffers and (optionally) optimizer state.
    pub fn add_network(&mut self, tag: &str, fingerprint: &str, params: &Parameters, adam: Option<&AdamState>) {
        self.fingerprints.insert(tag.to_string(), fingerprint.to_string());
        for (name, entry) in params.iter() {
            let kind = if entry.trainable { "param" } else { "buffer" };
            self.tensors.insert(format!("{tag}/{kind}/{name}"), entry.tensor.clone());
        }
        if let Some(adam) = adam {
            for (name, t) in &adam.m {
                self.tensors.insert(format!("{tag}/adam.m/{name}"), t.clone());
            }
            for (name, t) in &adam.v {
                self.tensors.insert(format!("{tag}/adam.v/{name}"), t.clone());
            }
            self.tensors.insert(format!("{tag}/adam.t"), Tensor::scalar(adam.t as f32));
        }
    }

    pub fn has_network(&self, tag: &str) -> bool {
        self.fingerprints.contains_key(tag)
    }

    /// Recover a network stored with [`Checkpoint::add_network`], refusing
    /// it when the architecture fingerprint differs.
    pub fn network(&self, tag: &str, expected_fingerprint: &str) -> Result<(Parameters, Option<AdamState>)> {
        let found = self
            .fingerprints
            .get(tag)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint has no network {tag:?}")))?;
        if found != expected_fingerprint {
            return Err(Error::Checkpoint(format!(
                "network {tag:?} fingerprint {found} does not match expected {expected_fingerprint}"
            )));
        }
        let mut params = Parameters::new();
        let mut adam = AdamState::new();
        let mut has_adam = false;
        let prefix = format!("{tag}/");
        for (full, t) in &self.tensors {
            let Some(rest) = full.strip_prefix(&prefix) else { continue };
            if rest == "adam.t" {
                adam.t = t.item() as u64;
                has_adam = true;
            } else if let Some(name) = rest.strip_prefix("param/") {
                params.insert_trainable(name, t.clone());
            } else if let Some(name) = rest.strip_prefix("buffer/") {
                params.insert_buffer(name, t.clone());
            } else if let Some(name) = rest.strip_prefix("adam.m/") {
                adam.m.insert(name.to_string(), t.clone());
            } else if let Some(name) = rest.strip_prefix("adam.v/") {
                adam.v.insert(name.to_string(), t.clone());
            }
        }
        Ok((params, has_adam.then_some(adam)))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut entries = Vec::with_capacity(self.tensors.len());
        let mut bytes = Vec::new();
        for (name, t) in &self.tensors {
            entries.push(ManifestEntry { name: name.clone(), shape: t.shape().to_vec(), offset: bytes.len() as u64 });
            for v in t.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            format: FORMAT.to_string(),
            fingerprints: self.fingerprints.clone(),
            metadata: self.metadata.clone(),
            tensors: entries,
        };
        fs::File::create(dir.join(DATA_FILE))?.write_all(&bytes)?;
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST_FILE);
        if !manifest_path.is_file() {
            return Err(Error::Checkpoint(format!("no checkpoint manifest at {}", manifest_path.display())));
        }
        let manifest: Manifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
        if manifest.format != FORMAT {
            return Err(Error::Checkpoint(format!("unknown checkpoint format {:?}", manifest.format)));
        }
        let bytes = fs::read(dir.join(DATA_FILE))?;
        let mut tensors = IndexMap::new();
        for e in manifest.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 4 * n;
            if end > bytes.len() {
                return Err(Error::Checkpoint(format!("tensor {} runs past end of data file", e.name)));
            }
            let data = bytes[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.insert(e.name, Tensor::new(&e.shape, data)?);
        }
        Ok(Checkpoint { fingerprints: manifest.fingerprints, metadata: manifest.metadata, tensors })
    }
}
