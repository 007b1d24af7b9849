use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use cqlab::io::blob_hash;
use serde::Serialize;
use serde_json::Value;

pub const OUT_ENV: &str = "CQLAB_OUT";
const DEFAULT_ROOT: &str = "runs";

#[derive(Debug, Clone, Serialize)]
pub struct InputRecord {
    pub role: String,
    pub source: String,
    pub hash: String,
}

/// What a run consumed and produced. `input_hash` covers the command,
/// resolved config, seed and input hashes; timestamps are excluded from it.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Value,
    pub seed: Option<u64>,
    pub inputs: Vec<InputRecord>,
    pub input_hash: String,
    pub outputs: Vec<String>,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub tool_version: String,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// Hash of a file, or of the sorted `relative-path hash` listing of a directory.
pub fn hash_path(path: &Path) -> Result<String> {
    if path.is_dir() {
        let mut files = Vec::new();
        collect_files(path, path, &mut files)?;
        files.sort();
        let mut listing = String::new();
        for rel in files {
            let bytes = std::fs::read(path.join(&rel))?;
            listing.push_str(&format!("{} {}\n", rel.display(), blob_hash(&bytes)));
        }
        Ok(blob_hash(listing.as_bytes()))
    } else {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(blob_hash(&bytes))
    }
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            out.push(p.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    Ok(())
}

pub struct Run {
    pub dir: PathBuf,
    manifest: RunManifest,
}

impl Run {
    /// Resolves the run directory (explicit `--out`, else
    /// `$CQLAB_OUT/<command>-<hash prefix>`) and creates it.
    pub fn start(command: &str, config: Value, seed: Option<u64>, inputs: Vec<InputRecord>, out: Option<&Path>) -> Result<Self> {
        let keyed = serde_json::json!({
            "command": command,
            "config": config,
            "seed": seed,
            "inputs": inputs.iter().map(|i| (&i.role, &i.hash)).collect::<Vec<_>>(),
        });
        let input_hash = blob_hash(serde_json::to_string(&keyed)?.as_bytes());
        let dir = match out {
            Some(p) => p.to_path_buf(),
            None => {
                let root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from(DEFAULT_ROOT));
                root.join(format!("{command}-{}", &input_hash[..12]))
            }
        };
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let manifest = RunManifest {
            command: command.into(),
            config,
            seed,
            inputs,
            input_hash,
            outputs: Vec::new(),
            started_unix: now(),
            finished_unix: 0,
            tool_version: env!("CARGO_PKG_VERSION").into(),
        };
        Ok(Self { dir, manifest })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn record(&mut self, name: impl Into<String>) {
        self.manifest.outputs.push(name.into());
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path(name);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&p, contents).with_context(|| format!("writing {}", p.display()))?;
        self.record(name);
        Ok(())
    }

    pub fn finish(mut self) -> Result<PathBuf> {
        self.manifest.outputs.sort();
        self.manifest.outputs.dedup();
        self.manifest.finished_unix = now();
        let json = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(self.path("manifest.json"), json + "\n")?;
        Ok(self.dir)
    }
}
