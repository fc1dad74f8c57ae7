//! Git-style content hashes (SHA-256 object format): a file hashes as
//! `blob <len>\0<bytes>`, a directory as a tree over its sorted entries.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};

fn object(kind: &str, body: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("{kind} {}\0", body.len()).as_bytes());
    h.update(body);
    hex::encode(h.finalize())
}

pub fn blob_hash(bytes: &[u8]) -> String {
    object("blob", bytes)
}

/// Hash of a file or directory tree. Entry names, not full paths, enter
/// the tree so the hash does not depend on where the input lives.
pub fn path_hash(path: &Path) -> Result<String> {
    let meta = fs::metadata(path).map_err(|e| CliError::io(path, e))?;
    if meta.is_file() {
        return Ok(blob_hash(&fs::read(path).map_err(|e| CliError::io(path, e))?));
    }
    let mut names: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| CliError::io(path, e))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()
        .map_err(|e| CliError::io(path, e))?;
    names.sort();
    let mut body = Vec::new();
    for p in names {
        let kind = if p.is_dir() { "tree" } else { "blob" };
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        body.extend_from_slice(format!("{kind} {name}\0{}\n", path_hash(&p)?).as_bytes());
    }
    Ok(object("tree", &body))
}

#[derive(Clone, Debug, Serialize)]
pub struct InputHash {
    pub role: String,
    pub path: String,
    pub hash: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct InputManifest {
    pub inputs: Vec<InputHash>,
    /// Tree hash over the role/hash pairs and the effective config.
    pub combined: String,
}

pub fn input_manifest(inputs: &[(&str, &Path)], config_toml: &str) -> Result<InputManifest> {
    let mut list = Vec::with_capacity(inputs.len());
    let mut body = Vec::new();
    for (role, path) in inputs {
        let hash = path_hash(path)?;
        body.extend_from_slice(format!("{role}\0{hash}\n").as_bytes());
        list.push(InputHash {
            role: role.to_string(),
            path: path.display().to_string(),
            hash,
        });
    }
    body.extend_from_slice(format!("config\0{}\n", blob_hash(config_toml.as_bytes())).as_bytes());
    Ok(InputManifest {
        inputs: list,
        combined: object("tree", &body),
    })
}
