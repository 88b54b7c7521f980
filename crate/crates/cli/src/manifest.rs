//! Per-run manifest: subcommand, resolved configuration, a content hash of
//! every input file, and a timestamp. One manifest per run, written next to
//! the run's primary output.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

pub struct RunManifest {
    pub subcommand: String,
    pub resolved_config: BTreeMap<String, String>,
    pub input_hash: String,
    pub timestamp_unix: u64,
}

/// Hash every input file (recursing into directories) in sorted path order.
pub fn hash_inputs(paths: &[&Path]) -> Result<String> {
    let mut files: Vec<PathBuf> = Vec::new();
    for path in paths {
        collect_files(path, &mut files)?;
    }
    files.sort();
    let mut outer = Sha256::new();
    for file in &files {
        let bytes = std::fs::read(file)
            .with_context(|| format!("hashing input {}", file.display()))?;
        let digest = Sha256::digest(&bytes);
        outer.update(file.to_string_lossy().as_bytes());
        outer.update(b":");
        outer.update(digest);
        outer.update(b"\n");
    }
    Ok(format!("{:x}", outer.finalize()))
}

fn collect_files(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_dir() {
        for entry in std::fs::read_dir(path)
            .with_context(|| format!("reading input dir {}", path.display()))?
        {
            collect_files(&entry?.path(), out)?;
        }
    } else if path.is_file() {
        out.push(path.to_path_buf());
    }
    Ok(())
}

impl RunManifest {
    pub fn new(subcommand: &str, config_text: &str, inputs: &[&Path]) -> Result<Self> {
        let resolved_config = config_text
            .lines()
            .filter_map(|l| l.split_once('='))
            .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
            .collect();
        // the timestamp is the one wall-clock value in any output file;
        // deterministic mode pins it so whole run directories byte-compare
        let timestamp_unix = if std::env::var("SHADES_DETERMINISTIC").as_deref() == Ok("1") {
            0
        } else {
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0)
        };
        Ok(Self {
            subcommand: subcommand.to_string(),
            resolved_config,
            input_hash: hash_inputs(inputs)?,
            timestamp_unix,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let json = serde_json::json!({
            "subcommand": self.subcommand,
            "resolved_config": self.resolved_config,
            "input_hash": self.input_hash,
            "timestamp_unix": self.timestamp_unix,
        });
        std::fs::write(path, serde_json::to_string_pretty(&json)?)
            .with_context(|| format!("writing manifest {}", path.display()))?;
        Ok(())
    }
}
