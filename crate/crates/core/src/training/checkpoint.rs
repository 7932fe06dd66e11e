//! Binary checkpoint container.
//!
//! Layout: magic `CILDA01\0`, manifest length (u64 LE), JSON manifest,
//! little-endian f64 payload, CRC-32 of the payload (u32 LE).

use std::collections::BTreeMap;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{EncoderConfig, EncoderModel, ParamSet};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 8] = b"CILDA01\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
}

/// Position of a ChaCha stream, enough to resume it exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngSnapshot {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngSnapshot {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let seed = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
        Self { seed, stream: rng.get_stream(), word_pos: rng.get_word_pos().to_string() }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = || Error::Manifest(format!("bad rng snapshot {self:?}"));
        if self.seed.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, byte) in seed.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    /// What the file holds, e.g. `teacher`, `student`, `train_state`.
    pub kind: String,
    /// Echo of the configuration that produced the file.
    pub config: serde_json::Value,
    pub models: BTreeMap<String, EncoderConfig>,
    pub history: serde_json::Value,
    pub rng: BTreeMap<String, RngSnapshot>,
    pub counters: BTreeMap<String, serde_json::Value>,
    pub entries: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn new(kind: &str, config: serde_json::Value) -> Self {
        Self {
            manifest: Manifest {
                format_version: FORMAT_VERSION,
                kind: kind.into(),
                config,
                models: BTreeMap::new(),
                history: serde_json::Value::Null,
                rng: BTreeMap::new(),
                counters: BTreeMap::new(),
                entries: Vec::new(),
            },
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        let offset = self
            .manifest
            .entries
            .last()
            .zip(self.tensors.last())
            .map_or(0, |(e, t)| e.offset + 8 * t.numel() as u64);
        self.manifest.entries.push(Entry { name: name.into(), shape: tensor.shape().to_vec(), offset });
        self.tensors.push(tensor);
    }

    /// Adds every tensor of `params` under `prefix.`.
    pub fn push_params(&mut self, prefix: &str, params: &ParamSet) {
        for (name, t) in params.iter() {
            self.push(format!("{prefix}.{name}"), t.clone());
        }
    }

    pub fn push_model(&mut self, role: &str, model: &EncoderModel) {
        self.manifest.models.insert(role.into(), model.config.clone());
        self.push_params(role, &model.params);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.manifest.entries.iter().position(|e| e.name == name).map(|i| &self.tensors[i])
    }

    pub fn has_model(&self, role: &str) -> bool {
        self.manifest.models.contains_key(role)
    }

    /// Rebuilds the [`ParamSet`] whose entries were pushed under `prefix`,
    /// following the order of `names`.
    pub fn params<'a>(&self, prefix: &str, names: impl IntoIterator<Item = &'a str>) -> Result<ParamSet> {
        let mut set = ParamSet::new();
        for name in names {
            let full = format!("{prefix}.{name}");
            let t = self.get(&full).ok_or_else(|| Error::Manifest(format!("missing entry `{full}`")))?;
            set.push(name, t.clone())?;
        }
        Ok(set)
    }

    pub fn model(&self, role: &str) -> Result<EncoderModel> {
        let config = self
            .manifest
            .models
            .get(role)
            .ok_or_else(|| Error::Manifest(format!("no model `{role}`")))?
            .clone();
        config.validate()?;
        let shapes = config.param_shapes();
        let params = self.params(role, shapes.iter().map(|(n, _)| n.as_str()))?;
        for ((name, shape), t) in shapes.iter().zip(params.tensors()) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Manifest(format!("`{role}.{name}` has shape {:?}, expected {shape:?}", t.shape())));
            }
        }
        Ok(EncoderModel { config, params })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest)?;
        let numel: usize = self.tensors.iter().map(Tensor::numel).sum();
        let mut out = Vec::with_capacity(8 + 8 + manifest.len() + 8 * numel + 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        let start = out.len();
        for t in &self.tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 {
            return Err(Error::Truncated("header"));
        }
        if &bytes[..8] != MAGIC {
            return Err(Error::BadMagic);
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let manifest_end = 16usize.checked_add(len).ok_or(Error::Truncated("manifest"))?;
        if bytes.len() < manifest_end {
            return Err(Error::Truncated("manifest"));
        }
        let manifest: Manifest = serde_json::from_slice(&bytes[16..manifest_end])
            .map_err(|e| Error::Manifest(e.to_string()))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::VersionMismatch { found: manifest.format_version, expected: FORMAT_VERSION });
        }
        let mut expected = 0u64;
        for e in &manifest.entries {
            if e.offset != expected {
                return Err(Error::Manifest(format!("entry `{}` at offset {}, expected {expected}", e.name, e.offset)));
            }
            expected += 8 * e.shape.iter().product::<usize>() as u64;
        }
        let payload_end = manifest_end + expected as usize;
        if bytes.len() < payload_end + 4 {
            return Err(Error::Truncated("payload"));
        }
        if bytes.len() > payload_end + 4 {
            return Err(Error::Manifest("trailing bytes after checksum".into()));
        }
        let payload = &bytes[manifest_end..payload_end];
        let stored = u32::from_le_bytes(bytes[payload_end..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let mut tensors = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            let start = e.offset as usize;
            let n: usize = e.shape.iter().product();
            let data = payload[start..start + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push(Tensor::new(e.shape.clone(), data)?);
        }
        Ok(Self { manifest, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
