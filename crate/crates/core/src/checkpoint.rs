//! Versioned JSON checkpoints guarded by a SHA-256 digest.
//!
//! Layout: one header line `{"kind":..,"version":..,"sha256":..}` followed by
//! the JSON payload. The digest covers the payload bytes exactly.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checksum mismatch in {path}: expected {expected}, found {found}")]
    Checksum {
        path: String,
        expected: String,
        found: String,
    },
    #[error("{path} holds a `{found}` checkpoint, expected `{expected}`")]
    WrongKind {
        path: String,
        expected: String,
        found: String,
    },
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("malformed checkpoint {path}: {reason}")]
    Malformed { path: String, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    version: u32,
    sha256: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn to_bytes<T: Serialize>(kind: &str, value: &T) -> Vec<u8> {
    let payload = serde_json::to_vec(value).expect("checkpoint payload serializes");
    let header = Header {
        kind: kind.to_string(),
        version: VERSION,
        sha256: sha256_hex(&payload),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    out.extend(payload);
    out
}

pub fn from_bytes<T: DeserializeOwned>(kind: &str, bytes: &[u8], path: &str) -> Result<T, CheckpointError> {
    let malformed = |reason: String| CheckpointError::Malformed {
        path: path.to_string(),
        reason,
    };
    let split = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| malformed("missing header line".into()))?;
    let header: Header =
        serde_json::from_slice(&bytes[..split]).map_err(|e| malformed(format!("header: {e}")))?;
    if header.version != VERSION {
        return Err(CheckpointError::Version(header.version));
    }
    if header.kind != kind {
        return Err(CheckpointError::WrongKind {
            path: path.to_string(),
            expected: kind.to_string(),
            found: header.kind,
        });
    }
    let payload = &bytes[split + 1..];
    let found = sha256_hex(payload);
    if found != header.sha256 {
        return Err(CheckpointError::Checksum {
            path: path.to_string(),
            expected: header.sha256,
            found,
        });
    }
    serde_json::from_slice(payload).map_err(|e| malformed(format!("payload: {e}")))
}

pub fn save<T: Serialize>(kind: &str, value: &T, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, to_bytes(kind, value))?;
    Ok(())
}

pub fn load<T: DeserializeOwned>(kind: &str, path: &Path) -> Result<T, CheckpointError> {
    let bytes = std::fs::read(path)?;
    from_bytes(kind, &bytes, &path.display().to_string())
}
