//! Versioned checkpoint container.
//!
//! Layout: 8-byte magic, u64 LE header length, JSON header, then the payload
//! of all arrays concatenated as little-endian f64. The header carries a
//! SHA-256 of the payload, so truncation or bit damage is detected on load
//! rather than surfacing as silently wrong weights.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Phase;
use crate::error::{PacoError, Result};
use crate::rng::RngState;

pub const MAGIC: &[u8; 8] = b"PACOCKP1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in f64 elements.
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    /// Flat `key = value` echo of the run configuration.
    pub config: String,
    pub epoch: usize,
    pub phase: Phase,
    pub global_step: u64,
    pub rng: RngState,
    /// Ablation switches as free-form JSON so the format does not chase the
    /// trainer's types.
    pub ablation: serde_json::Value,
    pub arrays: Vec<ArrayEntry>,
    pub payload_sha256: String,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Descriptive fields of a checkpoint, minus the array directory which
/// `save_checkpoint` fills in.
#[derive(Debug, Clone)]
pub struct CheckpointMeta {
    pub config: String,
    pub epoch: usize,
    pub phase: Phase,
    pub global_step: u64,
    pub rng: RngState,
    pub ablation: serde_json::Value,
}

pub fn save_checkpoint(
    path: &Path,
    meta: &CheckpointMeta,
    arrays: &BTreeMap<String, ArrayD<f64>>,
) -> Result<()> {
    let mut entries = Vec::with_capacity(arrays.len());
    let mut payload: Vec<u8> = Vec::new();
    let mut offset = 0u64;
    for (name, arr) in arrays {
        entries.push(ArrayEntry {
            name: name.clone(),
            shape: arr.shape().to_vec(),
            offset,
        });
        for v in arr.iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        offset += arr.len() as u64;
    }
    let header = CheckpointHeader {
        version: FORMAT_VERSION,
        config: meta.config.clone(),
        epoch: meta.epoch,
        phase: meta.phase,
        global_step: meta.global_step,
        rng: meta.rng.clone(),
        ablation: meta.ablation.clone(),
        arrays: entries,
        payload_sha256: sha256_hex(&payload),
    };
    let header_json = serde_json::to_vec(&header)?;
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(MAGIC)?;
    file.write_all(&(header_json.len() as u64).to_le_bytes())?;
    file.write_all(&header_json)?;
    file.write_all(&payload)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, BTreeMap<String, ArrayD<f64>>)> {
    let mut file = fs::File::open(path).map_err(|e| {
        PacoError::Checkpoint(format!("cannot open {}: {e}", path.display()))
    })?;
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)
        .map_err(|_| PacoError::Checkpoint("file too short for magic".into()))?;
    if &magic != MAGIC {
        return Err(PacoError::Checkpoint(format!(
            "bad magic {:?}; not a checkpoint",
            &magic
        )));
    }
    let mut len_bytes = [0u8; 8];
    file.read_exact(&mut len_bytes)
        .map_err(|_| PacoError::Checkpoint("file too short for header length".into()))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    if header_len > 64 * 1024 * 1024 {
        return Err(PacoError::Checkpoint(format!(
            "implausible header length {header_len}"
        )));
    }
    let mut header_json = vec![0u8; header_len];
    file.read_exact(&mut header_json)
        .map_err(|_| PacoError::Checkpoint("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&header_json)
        .map_err(|e| PacoError::Checkpoint(format!("header parse: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(PacoError::Checkpoint(format!(
            "unsupported checkpoint version {}",
            header.version
        )));
    }
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;
    if sha256_hex(&payload) != header.payload_sha256 {
        return Err(PacoError::Checkpoint(
            "payload checksum mismatch; checkpoint is corrupt".into(),
        ));
    }
    let total_f64 = payload.len() / 8;
    let mut arrays = BTreeMap::new();
    for entry in &header.arrays {
        let len: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        if start + len > total_f64 {
            return Err(PacoError::Checkpoint(format!(
                "array {} exceeds payload",
                entry.name
            )));
        }
        let mut data = Vec::with_capacity(len);
        for i in 0..len {
            let b = &payload[(start + i) * 8..(start + i + 1) * 8];
            data.push(f64::from_le_bytes(b.try_into().expect("8 bytes")));
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&entry.shape), data)
            .map_err(|e| PacoError::Checkpoint(format!("array {}: {e}", entry.name)))?;
        arrays.insert(entry.name.clone(), arr);
    }
    Ok((header, arrays))
}
