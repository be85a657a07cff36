//! File helpers shared by every persisted artifact: digests, atomic writes and
//! versioned JSON containers.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Hex-encoded SHA-256 of `bytes`.
pub fn digest_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn digest_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(digest_bytes(&bytes))
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, &to_json_bytes(value)?)
}

/// Reads a JSON container whose top-level `version` field must equal `expected`.
///
/// Unparseable content is reported as a corrupt file; a well-formed container
/// with another version tag is reported as a version mismatch.
pub fn read_versioned<T: DeserializeOwned>(path: &Path, expected: &str) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value =
        serde_json::from_slice(&bytes).map_err(|e| Error::CorruptFile {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
    match value.get("version").and_then(|v| v.as_str()) {
        Some(v) if v == expected => {}
        Some(v) => {
            return Err(Error::VersionMismatch {
                found: v.to_string(),
                expected: expected.to_string(),
            })
        }
        None => {
            return Err(Error::CorruptFile {
                path: path.to_path_buf(),
                message: "missing version tag".into(),
            })
        }
    }
    serde_json::from_value(value).map_err(|e| Error::CorruptFile {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}
