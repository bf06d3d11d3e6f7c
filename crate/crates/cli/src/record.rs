use std::path::{Path, PathBuf};

use freqalign::Image;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{hex, RunConfig};
use crate::error::CliResult;

#[derive(Debug, Serialize)]
pub struct Artifact {
    /// Relative to the output directory.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Serialize)]
pub struct Versions {
    pub freqalign: &'static str,
    pub cli: &'static str,
}

/// Replay information written as `run.json` next to the artifacts.
#[derive(Debug, Serialize)]
pub struct RunRecord {
    pub subcommand: String,
    pub seed: u64,
    pub config_hash: String,
    pub versions: Versions,
    pub config: RunConfig,
    pub summary: serde_json::Value,
    pub artifacts: Vec<Artifact>,
}

/// Output directory that remembers every file written through it.
pub struct Outputs {
    dir: PathBuf,
    written: Vec<PathBuf>,
}

impl Outputs {
    pub fn new(dir: &Path) -> CliResult<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            written: Vec::new(),
        })
    }

    /// Path for `name` inside the output directory, creating parent folders.
    pub fn path(&self, name: &str) -> CliResult<PathBuf> {
        let p = self.dir.join(name);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent)?;
        }
        Ok(p)
    }

    /// Registers a file written by other code.
    pub fn register(&mut self, path: PathBuf) {
        if !self.written.contains(&path) {
            self.written.push(path);
        }
    }

    pub fn write(&mut self, name: &str, bytes: impl AsRef<[u8]>) -> CliResult<PathBuf> {
        let p = self.path(name)?;
        std::fs::write(&p, bytes)?;
        self.register(p.clone());
        Ok(p)
    }

    pub fn write_with(
        &mut self,
        name: &str,
        f: impl FnOnce(&mut Vec<u8>) -> freqalign::Result<()>,
    ) -> CliResult<PathBuf> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.write(name, buf)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<PathBuf> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text)
    }

    pub fn save_image(&mut self, name: &str, img: &Image) -> CliResult<PathBuf> {
        let p = self.path(name)?;
        freqalign::io::save_image(img, &p)?;
        self.register(p.clone());
        Ok(p)
    }

    pub fn finish(
        self,
        subcommand: &str,
        cfg: &RunConfig,
        summary: serde_json::Value,
    ) -> CliResult<PathBuf> {
        let mut artifacts = Vec::with_capacity(self.written.len());
        for p in &self.written {
            let bytes = std::fs::read(p)?;
            let rel = p.strip_prefix(&self.dir).unwrap_or(p);
            artifacts.push(Artifact {
                path: rel.to_string_lossy().replace('\\', "/"),
                sha256: hex(&Sha256::digest(&bytes)),
                bytes: bytes.len() as u64,
            });
        }
        let record = RunRecord {
            subcommand: subcommand.to_string(),
            seed: cfg.seed,
            config_hash: cfg.hash()?,
            versions: Versions {
                freqalign: freqalign::VERSION,
                cli: env!("CARGO_PKG_VERSION"),
            },
            config: cfg.clone(),
            summary,
            artifacts,
        };
        let p = self.dir.join("run.json");
        let mut text = serde_json::to_string_pretty(&record)?;
        text.push('\n');
        std::fs::write(&p, text)?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_lists_digests_of_written_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = Outputs::new(dir.path()).unwrap();
        out.write("a/b.txt", "abc").unwrap();
        let p = out
            .finish("test", &RunConfig::default(), serde_json::json!({}))
            .unwrap();
        let v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap();
        assert_eq!(v["artifacts"][0]["path"], "a/b.txt");
        assert_eq!(
            v["artifacts"][0]["sha256"],
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(v["subcommand"], "test");
        assert_eq!(v["config_hash"].as_str().unwrap().len(), 64);
    }
}
