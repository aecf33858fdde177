//! Run manifests: the resolved configuration plus content hashes of every
//! input file. Wall-clock data goes to a separate metadata file so that
//! manifests of identical runs compare equal byte for byte.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct InputFile {
    pub path: String,
    pub sha256: String,
}

/// SHA-256 over `"blob <len>\0"` followed by the content, as git hashes
/// objects in a SHA-256 repository.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn hash_file(path: &Path) -> Result<InputFile> {
    let bytes = fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(InputFile {
        path: path.display().to_string(),
        sha256: blob_hash(&bytes),
    })
}

/// A dataset manifest and every tensor file it names.
pub fn dataset_files(manifest: &Path) -> Result<Vec<PathBuf>> {
    let text = fs::read_to_string(manifest).with_context(|| format!("reading {}", manifest.display()))?;
    let value: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", manifest.display()))?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut files = vec![manifest.to_path_buf()];
    if let Value::Object(map) = value {
        for (key, v) in map {
            if let (true, Value::String(f)) = (key.ends_with("_file"), v) {
                let p = Path::new(&f);
                files.push(if p.is_absolute() { p.to_path_buf() } else { base.join(p) });
            }
        }
    }
    Ok(files)
}

/// A tensor file and its JSON sidecar.
pub fn text_embedding_files(tensor: &Path) -> Vec<PathBuf> {
    vec![tensor.to_path_buf(), clipsid::dataset::sidecar_path(tensor)]
}

pub fn hash_inputs(files: &[PathBuf]) -> Result<Vec<InputFile>> {
    files.iter().map(|f| hash_file(f)).collect()
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// `run_metadata.json`: start time and tool version.
pub fn write_metadata(dir: &Path, command: &str, started: SystemTime) -> Result<()> {
    let secs = |t: SystemTime| t.duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
    let finished = SystemTime::now();
    write_json(
        &dir.join("run_metadata.json"),
        &serde_json::json!({
            "command": command,
            "version": env!("CARGO_PKG_VERSION"),
            "started_unix": secs(started),
            "finished_unix": secs(finished),
        }),
    )
}
