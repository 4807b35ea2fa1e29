//! Per-command run manifests.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const RUN_MANIFEST_NAME: &str = "run_manifest.txt";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub config: Vec<(String, String)>,
    pub seed: u64,
    /// `(path, sha256)`.
    pub inputs: Vec<(String, String)>,
    pub outputs: Vec<String>,
    pub notes: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, seed: u64) -> Self {
        RunManifest {
            command: command.to_string(),
            seed,
            ..Default::default()
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "command={}", self.command);
        let _ = writeln!(s, "tool_version={}", env!("CARGO_PKG_VERSION"));
        let _ = writeln!(s, "seed={}", self.seed);
        for (k, v) in &self.config {
            let _ = writeln!(s, "config.{k}={v}");
        }
        for (p, h) in &self.inputs {
            let _ = writeln!(s, "input={p} sha256={h}");
        }
        for p in &self.outputs {
            let _ = writeln!(s, "output={p}");
        }
        for n in &self.notes {
            let _ = writeln!(s, "note={n}");
        }
        s
    }

    /// Writes `run_manifest.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(RUN_MANIFEST_NAME);
        std::fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))
    }
}

/// SHA-256 of a file, or of a directory's files (name and content hash, in
/// name order, recursively).
pub fn hash_path(path: &Path) -> Result<String> {
    let meta = std::fs::metadata(path).map_err(|e| Error::io(path, e))?;
    if meta.is_file() {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        return Ok(hex::encode(Sha256::digest(&bytes)));
    }
    let mut entries: Vec<_> = std::fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    let mut h = Sha256::new();
    for p in entries {
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        if name == RUN_MANIFEST_NAME {
            continue;
        }
        h.update(name.as_bytes());
        h.update([0u8]);
        h.update(hash_path(&p)?.as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}
