use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub fn read_text(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

/// Writes via a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, contents: &[u8]) -> CliResult<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| CliError::io(dir, e))?;
    tmp.write_all(contents).map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

pub const MANIFEST_NAME: &str = "run_manifest.json";

/// Expands directories to their `*.json` files, skipping run manifests;
/// plain files pass through.
/// The result is sorted so batch order never depends on the filesystem.
pub fn expand_inputs(inputs: &[PathBuf]) -> CliResult<Vec<PathBuf>> {
    let mut out = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let entries = std::fs::read_dir(input).map_err(|e| CliError::io(input, e))?;
            for entry in entries {
                let p = entry.map_err(|e| CliError::io(input, e))?.path();
                let is_manifest = p.file_name().is_some_and(|n| n == MANIFEST_NAME);
                if p.extension().is_some_and(|x| x == "json") && p.is_file() && !is_manifest {
                    out.push(p);
                }
            }
        } else if input.is_file() {
            out.push(input.clone());
        } else {
            return Err(CliError::io(input, std::io::Error::from(std::io::ErrorKind::NotFound)));
        }
    }
    out.sort();
    out.dedup();
    Ok(out)
}

pub fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

#[derive(Debug, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Config echo plus content digests, written beside the outputs. The only
/// place a timestamp appears.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub created_unix: u64,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
}

fn digests(paths: &[PathBuf], root: Option<&Path>) -> CliResult<Vec<FileDigest>> {
    paths
        .iter()
        .map(|p| {
            let bytes = std::fs::read(p).map_err(|e| CliError::io(p, e))?;
            let shown = root.and_then(|r| p.strip_prefix(r).ok()).unwrap_or(p);
            Ok(FileDigest { path: shown.to_string_lossy().into_owned(), sha256: sha256_hex(&bytes) })
        })
        .collect()
}

pub fn write_manifest(
    out: &Path,
    command: &str,
    config: serde_json::Value,
    inputs: &[PathBuf],
    outputs: &[PathBuf],
) -> CliResult<()> {
    let manifest = RunManifest {
        command: command.to_string(),
        config,
        created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        inputs: digests(inputs, None)?,
        outputs: digests(outputs, Some(out))?,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_atomic(&out.join(MANIFEST_NAME), text.as_bytes())
}
