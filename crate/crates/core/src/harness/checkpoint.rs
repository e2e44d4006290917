//! Single-file checkpoint container.
//!
//! Layout: 8-byte magic, little-endian `u64` header length, JSON header
//! (config, epoch, optimizer scalars, array table), the arrays as
//! little-endian `f64` in table order, then the SHA-256 digest of every
//! preceding byte.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Mat;
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::model::Model;
use crate::harness::optim::{Adam, AdamSettings};
use crate::params::ParamStore;

pub const MAGIC: &[u8; 8] = b"AVGNCKPT";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub epoch: usize,
    pub params: ParamStore,
    pub optimizer: Adam,
}

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    epoch: usize,
    config: RunConfig,
    optimizer: AdamSettings,
    arrays: Vec<ArrayEntry>,
}

fn corrupt<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Checkpoint(msg.into()))
}

impl Checkpoint {
    pub fn new(model: &Model, optimizer: &Adam, epoch: usize) -> Self {
        Self { config: model.config.clone(), epoch, params: model.params.clone(), optimizer: optimizer.clone() }
    }

    pub fn model(&self) -> Result<Model> {
        Model::from_params(self.config.clone(), self.params.clone())
    }

    fn arrays(&self) -> Vec<(String, &Mat)> {
        let mut out: Vec<(String, &Mat)> = self.params.iter().map(|(n, m)| (n.to_string(), m)).collect();
        for (kind, moments) in [("m", &self.optimizer.m), ("v", &self.optimizer.v)] {
            out.extend(self.params.names().iter().zip(moments).map(|(n, m)| (format!("adam.{kind}/{n}"), m)));
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let arrays = self.arrays();
        let header = Header {
            format_version: FORMAT_VERSION,
            epoch: self.epoch,
            config: self.config.clone(),
            optimizer: self.optimizer.settings,
            arrays: arrays
                .iter()
                .map(|(name, m)| ArrayEntry { name: name.clone(), rows: m.nrows(), cols: m.ncols() })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(header.len() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, m) in &arrays {
            for v in m.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 + DIGEST_LEN || &bytes[..MAGIC.len()] != MAGIC {
            return corrupt("not a checkpoint file");
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return corrupt("checksum mismatch");
        }
        let mut pos = MAGIC.len();
        let header_len = u64::from_le_bytes(body[pos..pos + 8].try_into().expect("8 bytes")) as usize;
        pos += 8;
        let Some(header_bytes) = body.get(pos..pos.saturating_add(header_len)) else {
            return corrupt("truncated header");
        };
        let header: Header = serde_json::from_slice(header_bytes)?;
        if header.format_version != FORMAT_VERSION {
            return corrupt(format!("unsupported format version {}", header.format_version));
        }
        pos += header_len;
        let mut named = Vec::with_capacity(header.arrays.len());
        for e in &header.arrays {
            let n = e.rows * e.cols;
            let Some(raw) = body.get(pos..pos + 8 * n) else {
                return corrupt(format!("array {} truncated", e.name));
            };
            let vals: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            named.push((e.name.clone(), Mat::from_shape_vec((e.rows, e.cols), vals).expect("size checked")));
            pos += 8 * n;
        }
        if pos != body.len() {
            return corrupt("trailing bytes after arrays");
        }
        if named.len() % 3 != 0 {
            return corrupt("array table does not hold parameters plus two moment sets");
        }
        let k = named.len() / 3;
        let mut params = ParamStore::new();
        let mut moments = (Vec::with_capacity(k), Vec::with_capacity(k));
        for (i, (name, m)) in named.into_iter().enumerate() {
            match i / k {
                0 => params.insert(name, m),
                1 => moments.0.push(m),
                _ => moments.1.push(m),
            }
        }
        header.config.validate()?;
        let ckpt = Self {
            config: header.config,
            epoch: header.epoch,
            params,
            optimizer: Adam { settings: header.optimizer, m: moments.0, v: moments.1 },
        };
        ckpt.model()?;
        Ok(ckpt)
    }

    /// Hex SHA-256 of the serialized container.
    pub fn checksum(&self) -> String {
        let bytes = self.to_bytes();
        bytes[bytes.len() - DIGEST_LEN..].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        // Write-then-rename keeps the previous file intact on failure.
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_bytes())?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
