//! Per-run manifest with a content hash of everything the run read.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST: &str = "manifest.json";

/// Git-style blob digest: the content is prefixed with `blob <len>\0`.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

/// Every regular file under `root`, as sorted paths relative to it.
pub fn list_files(root: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(root).unwrap_or(&path).to_path_buf());
            }
        }
    }
    out.sort();
    Ok(out)
}

fn slash(p: &Path) -> String {
    p.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

/// Hash of the inputs a run read: command, resolved config, seed and files.
#[derive(Default)]
pub struct InputHasher {
    entries: Vec<(String, String)>,
}

impl InputHasher {
    pub fn text(&mut self, label: &str, text: &str) {
        self.entries.push((label.to_string(), blob_hash(text.as_bytes())));
    }

    /// A file, or every file below a directory.
    pub fn path(&mut self, label: &str, path: &Path) -> std::io::Result<()> {
        if path.is_dir() {
            for rel in list_files(path)? {
                let bytes = std::fs::read(path.join(&rel))?;
                self.entries.push((format!("{label}/{}", slash(&rel)), blob_hash(&bytes)));
            }
        } else {
            self.entries.push((label.to_string(), blob_hash(&std::fs::read(path)?)));
        }
        Ok(())
    }

    /// Tree digest over `label hash` lines in sorted order.
    pub fn finish(mut self) -> String {
        self.entries.sort();
        let listing: String = self.entries.iter().map(|(l, h)| format!("{h} {l}\n")).collect();
        blob_hash(listing.as_bytes())
    }
}

#[derive(Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub config_path: Option<String>,
    pub seed: Option<u64>,
    pub input_hash: String,
    pub outputs: Vec<Output>,
    pub duration_s: f64,
}

#[derive(Serialize)]
pub struct Output {
    pub path: String,
    pub sha256: String,
}

impl Manifest {
    /// Record every file under `out` except the manifest itself.
    pub fn write(
        out: &Path,
        command: &str,
        config_path: Option<&Path>,
        seed: Option<u64>,
        input_hash: String,
        duration: Duration,
    ) -> std::io::Result<()> {
        let outputs = list_files(out)?
            .into_iter()
            .filter(|p| p != Path::new(MANIFEST))
            .map(|rel| {
                Ok(Output {
                    sha256: blob_hash(&std::fs::read(out.join(&rel))?),
                    path: slash(&rel),
                })
            })
            .collect::<std::io::Result<Vec<_>>>()?;
        let m = Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_path: config_path.map(|p| p.display().to_string()),
            seed,
            input_hash,
            outputs,
            duration_s: duration.as_secs_f64(),
        };
        let text = serde_json::to_string_pretty(&m).map_err(std::io::Error::other)?;
        std::fs::write(out.join(MANIFEST), text + "\n")
    }
}
