//! Per-run manifest: the exact configuration, seed, and SHA-256 of every
//! artifact written — enough to reproduce the run byte for byte.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub struct Manifest {
    verb: String,
    seed: u64,
    config_echo: String,
    notes: Vec<String>,
    artifacts: Vec<(String, String)>,
}

impl Manifest {
    pub fn new(verb: &str, cfg: &RunConfig, seed: u64) -> Self {
        Manifest {
            verb: verb.to_string(),
            seed,
            config_echo: cfg.render(),
            notes: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    pub fn note(&mut self, line: &str) {
        self.notes.push(line.to_string());
    }

    /// Record a written file by its path relative to the run directory.
    pub fn artifact(&mut self, out: &Path, path: &Path) -> std::io::Result<()> {
        let bytes = std::fs::read(path)?;
        let hash = hex::encode(Sha256::digest(&bytes));
        let rel: PathBuf = path.strip_prefix(out).unwrap_or(path).to_path_buf();
        self.artifacts.push((rel.display().to_string(), hash));
        Ok(())
    }

    pub fn write(&self, out: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(out)?;
        let mut s = String::new();
        s.push_str(&format!("command = {}\n", self.verb));
        s.push_str(&format!("seed = {}\n", self.seed));
        for n in &self.notes {
            s.push_str(&format!("note = {n}\n"));
        }
        s.push_str("\n[config]\n");
        s.push_str(&self.config_echo);
        s.push_str("\n[artifacts]\n");
        for (rel, hash) in &self.artifacts {
            s.push_str(&format!("{hash}  {rel}\n"));
        }
        std::fs::write(out.join("manifest.txt"), s)
    }
}
