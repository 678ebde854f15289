use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Provenance record written once into every output directory.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub version: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    /// sha256 of every input file, keyed by path.
    pub inputs: BTreeMap<String, String>,
    /// sha256 of every file this command wrote, keyed by file name.
    pub outputs: BTreeMap<String, String>,
    pub elapsed_seconds: f64,
}

pub struct ManifestBuilder {
    started: Instant,
    manifest: RunManifest,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

impl ManifestBuilder {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        Self {
            started: Instant::now(),
            manifest: RunManifest {
                command: command.to_string(),
                argv: std::env::args().collect(),
                version: format!("ensgraph {}", env!("CARGO_PKG_VERSION")),
                config,
                seeds: Vec::new(),
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                elapsed_seconds: 0.0,
            },
        }
    }

    pub fn seeds(&mut self, seeds: impl IntoIterator<Item = u64>) {
        self.manifest.seeds.extend(seeds);
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        self.manifest.inputs.insert(path.display().to_string(), sha256_file(path)?);
        Ok(())
    }

    /// Checksum every regular file in `dir` (except a previous manifest)
    /// and write `manifest.json`.
    pub fn finish(mut self, dir: &Path) -> Result<RunManifest> {
        let mut names: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().map(|t| t.is_file()).unwrap_or(false))
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n != MANIFEST_FILE)
            .collect();
        names.sort();
        for n in names {
            self.manifest.outputs.insert(n.clone(), sha256_file(&dir.join(&n))?);
        }
        self.manifest.elapsed_seconds = self.started.elapsed().as_secs_f64();
        std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(self.manifest)
    }
}
