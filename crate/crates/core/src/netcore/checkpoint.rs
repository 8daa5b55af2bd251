//! Checkpoint files: a JSON header next to a raw parameter blob.
//!
//! `<stem>.json` holds a [`CheckpointHeader`]; `<stem>.bin` holds exactly
//! `param_count` IEEE-754 binary64 values, little-endian, in the parameter
//! layout documented on [`super::Network`], with no framing.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Network, NetworkSpec};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "cep-net-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub spec: NetworkSpec,
    pub seed: u64,
    pub param_count: usize,
    /// File name of the parameter blob, relative to the header.
    pub blob: String,
    /// Free-form training metadata (method, beta, loss curve, config hash, ...).
    #[serde(default)]
    pub metadata: serde_json::Value,
}

fn blob_path(header_path: &Path) -> PathBuf {
    header_path.with_extension("bin")
}

/// Writes `net` to `header_path` (JSON) and a sibling `.bin` blob.
pub fn save_checkpoint(
    net: &Network,
    header_path: &Path,
    seed: u64,
    metadata: serde_json::Value,
) -> Result<CheckpointHeader> {
    let blob = blob_path(header_path);
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.to_string(),
        spec: net.spec().clone(),
        seed,
        param_count: net.param_count(),
        blob: blob
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        metadata,
    };
    let mut bytes = Vec::with_capacity(net.param_count() * 8);
    for p in net.params() {
        bytes.extend_from_slice(&p.to_le_bytes());
    }
    fs::write(&blob, bytes).map_err(|e| Error::io(&blob, e))?;
    let json = serde_json::to_string_pretty(&header)?;
    fs::write(header_path, json).map_err(|e| Error::io(header_path, e))?;
    Ok(header)
}

pub fn load_checkpoint(header_path: &Path) -> Result<(Network, CheckpointHeader)> {
    let text = fs::read_to_string(header_path).map_err(|e| Error::io(header_path, e))?;
    let header: CheckpointHeader = serde_json::from_str(&text)?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::Format(format!("unknown checkpoint format {:?}", header.format)));
    }
    let blob = header_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&header.blob);
    let bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
    if bytes.len() != header.param_count * 8 {
        return Err(Error::Format(format!(
            "blob {} holds {} bytes, expected {}",
            blob.display(),
            bytes.len(),
            header.param_count * 8
        )));
    }
    let params = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let net = Network::from_params(header.spec.clone(), params)?;
    Ok((net, header))
}
