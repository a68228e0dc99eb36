//! Binary checkpoint format.
//!
//! ```text
//! "EYID" | major u16 | minor u16 | header_len u64 | payload_len u64
//! | JSON header | f32 LE tensor payload | SHA-256 of everything before
//! ```
//!
//! All integers are little-endian. The header lists every tensor with its
//! shape and element offset into the payload.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{ModelBundle, ModelConfig, NamedTensors, StageFlags, TrainingMeta};
use crate::signal::{TransformConfig, ZScoreStats};

pub const MAGIC: &[u8; 4] = b"EYID";
pub const VERSION_MAJOR: u16 = 1;
pub const VERSION_MINOR: u16 = 0;
const PREFIX_LEN: usize = 4 + 2 + 2 + 8 + 8;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("checkpoint truncated: {found} bytes, expected {expected}")]
    Truncated { expected: usize, found: usize },
    #[error("checkpoint checksum mismatch (file corrupted)")]
    Checksum,
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("checkpoint version {major}.{minor} is not supported (expected {VERSION_MAJOR}.x)")]
    Version { major: u16, minor: u16 },
    #[error("checkpoint header: {0}")]
    Header(String),
}

impl CheckpointError {
    /// Stable identifier per failure kind.
    pub fn code(&self) -> &'static str {
        match self {
            CheckpointError::Io { .. } => "io",
            CheckpointError::Truncated { .. } => "truncated",
            CheckpointError::Checksum => "checksum",
            CheckpointError::BadMagic => "magic",
            CheckpointError::Version { .. } => "version",
            CheckpointError::Header(_) => "header",
        }
    }
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    labels: Vec<String>,
    transform: TransformConfig,
    zscore: ZScoreStats,
    trained: StageFlags,
    meta: TrainingMeta,
    tensors: Vec<TensorEntry>,
}

fn named(bundle: &ModelBundle) -> Vec<(String, &eyedent_autograd::Tensor<f32>)> {
    let mut all = bundle.slow.all();
    all.extend(bundle.fast.all());
    all.extend(bundle.joint.all());
    all
}

pub fn to_bytes(bundle: &ModelBundle) -> Vec<u8> {
    let tensors = named(bundle);
    let mut offset = 0;
    let index = tensors
        .iter()
        .map(|(name, t)| {
            let e = TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += t.numel();
            e
        })
        .collect();
    let header = Header {
        config: bundle.config.clone(),
        labels: bundle.labels.clone(),
        transform: bundle.transform,
        zscore: bundle.zscore,
        trained: bundle.trained,
        meta: bundle.meta.clone(),
        tensors: index,
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let payload_len = offset * 4;
    let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + payload_len + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION_MAJOR.to_le_bytes());
    out.extend_from_slice(&VERSION_MINOR.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&(payload_len as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in &tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

/// Hex SHA-256 of the serialized model; templates record it so they are
/// only matched against the model that produced them.
pub fn fingerprint(bundle: &ModelBundle) -> String {
    hex::encode(Sha256::digest(to_bytes(bundle)))
}

fn u64_at(bytes: &[u8], at: usize) -> usize {
    u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8 bytes")) as usize
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelBundle> {
    let min = PREFIX_LEN + DIGEST_LEN;
    if bytes.len() < min {
        return Err(CheckpointError::Truncated {
            expected: min,
            found: bytes.len(),
        });
    }
    let declared = PREFIX_LEN
        .saturating_add(u64_at(bytes, 8))
        .saturating_add(u64_at(bytes, 16))
        .saturating_add(DIGEST_LEN);
    let (body, trailer) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != trailer {
        // a short file also fails the checksum; report it as truncation
        if declared > bytes.len() {
            return Err(CheckpointError::Truncated {
                expected: declared,
                found: bytes.len(),
            });
        }
        return Err(CheckpointError::Checksum);
    }
    if &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let major = u16::from_le_bytes([bytes[4], bytes[5]]);
    let minor = u16::from_le_bytes([bytes[6], bytes[7]]);
    if major != VERSION_MAJOR {
        return Err(CheckpointError::Version { major, minor });
    }
    if declared != bytes.len() {
        return Err(CheckpointError::Truncated {
            expected: declared,
            found: bytes.len(),
        });
    }
    let header_len = u64_at(bytes, 8);
    let header: Header =
        serde_json::from_slice(&bytes[PREFIX_LEN..PREFIX_LEN + header_len]).map_err(|e| CheckpointError::Header(e.to_string()))?;
    let payload = &bytes[PREFIX_LEN + header_len..bytes.len() - DIGEST_LEN];

    let mut bundle = ModelBundle::new(header.config, header.labels, header.transform, header.zscore, header.meta.seed)
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    bundle.trained = header.trained;
    bundle.meta = header.meta;
    let mut slots = bundle.slow.all_mut();
    slots.extend(bundle.fast.all_mut());
    slots.extend(bundle.joint.all_mut());
    if slots.len() != header.tensors.len() {
        return Err(CheckpointError::Header(format!(
            "{} tensors listed, architecture has {}",
            header.tensors.len(),
            slots.len()
        )));
    }
    for ((name, slot), entry) in slots.iter_mut().zip(&header.tensors) {
        if *name != entry.name || slot.shape() != entry.shape.as_slice() {
            return Err(CheckpointError::Header(format!(
                "tensor {} {:?} does not match architecture {} {:?}",
                entry.name,
                entry.shape,
                name,
                slot.shape()
            )));
        }
        let n = slot.numel();
        let (start, end) = (entry.offset * 4, (entry.offset + n) * 4);
        if end > payload.len() {
            return Err(CheckpointError::Header(format!("tensor {} extends past the payload", entry.name)));
        }
        for (dst, chunk) in slot.data_mut().iter_mut().zip(payload[start..end].chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
        }
    }
    drop(slots);
    Ok(bundle)
}

pub fn save(bundle: &ModelBundle, path: &Path) -> Result<()> {
    let io = |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    fs::write(path, to_bytes(bundle)).map_err(io)
}

pub fn load(path: &Path) -> Result<ModelBundle> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    from_bytes(&bytes)
}
