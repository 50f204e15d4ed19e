//! `provenance.json`: tool version, resolved config and input digests. No
//! timestamps or absolute paths, so identical runs write identical files.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use tracespace::error::Error;

pub const FILE: &str = "provenance.json";

#[derive(Serialize)]
struct Provenance<'a, T> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    config: &'a T,
    inputs: serde_json::Map<String, serde_json::Value>,
}

/// Provenance path for a file artifact: `<name>.provenance.json` beside it.
pub fn beside(artifact: &Path) -> PathBuf {
    let name = artifact.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    artifact.with_file_name(format!("{name}.{FILE}"))
}

fn io(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn hash_into(h: &mut Sha256, root: &Path, path: &Path) -> Result<(), Error> {
    let rel = path.strip_prefix(root).unwrap_or(path).to_string_lossy().replace('\\', "/");
    if path.is_dir() {
        let mut entries = fs::read_dir(path)
            .map_err(|e| io(path, e))?
            .map(|e| e.map(|e| e.path()).map_err(|e| io(path, e)))
            .collect::<Result<Vec<_>, _>>()?;
        entries.sort();
        for p in entries {
            if p.file_name().is_some_and(|n| n.to_string_lossy().ends_with(FILE)) {
                continue;
            }
            hash_into(h, root, &p)?;
        }
    } else {
        let bytes = fs::read(path).map_err(|e| io(path, e))?;
        h.update(rel.as_bytes());
        h.update([0]);
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    Ok(())
}

/// SHA-256 over a file, or over every file of a directory tree in sorted
/// order with relative names. Provenance files are skipped.
pub fn hash_path(path: &Path) -> anyhow::Result<String> {
    if !path.exists() {
        return Err(io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "input not found")).into());
    }
    let mut h = Sha256::new();
    hash_into(&mut h, path, path)?;
    Ok(hex::encode(h.finalize()))
}

pub fn write_provenance<T: Serialize>(path: &Path, command: &str, config: &T, inputs: &[(&str, String)]) -> anyhow::Result<()> {
    let p = Provenance {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        command,
        config,
        inputs: inputs.iter().map(|(k, v)| (k.to_string(), serde_json::Value::String(v.clone()))).collect(),
    };
    let mut text = serde_json::to_string_pretty(&p)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| io(path, e))?;
    Ok(())
}
