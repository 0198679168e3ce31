//! Run manifests. Every successful run leaves `manifest.txt` in its output
//! directory; a later run with the same manifest text and all artifacts in
//! place has nothing to do.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub command: String,
    pub seed: Option<u64>,
    pub config: Vec<(String, String)>,
    /// Input files with their content digests.
    pub inputs: Vec<(String, String)>,
    /// Files the run writes, relative to the output directory.
    pub artifacts: Vec<String>,
}

impl Manifest {
    pub fn new(command: &str, seed: Option<u64>) -> Self {
        Self {
            command: command.into(),
            seed,
            config: Vec::new(),
            inputs: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    pub fn set(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.config.push((key.into(), value.to_string()));
        self
    }

    pub fn input(&mut self, path: &Path) -> Result<&mut Self> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let digest = Sha256::digest(&bytes);
        let hex = digest.iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        });
        self.inputs.push((path.display().to_string(), hex));
        Ok(self)
    }

    pub fn artifact(&mut self, name: impl Into<String>) -> &mut Self {
        self.artifacts.push(name.into());
        self
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "ntl-manifest {MANIFEST_VERSION}\ntool_version {}\ncommand {}\n",
            env!("CARGO_PKG_VERSION"),
            self.command
        );
        match self.seed {
            Some(s) => writeln!(out, "seed {s}").unwrap(),
            None => out.push_str("seed none\n"),
        }
        for (k, v) in &self.config {
            writeln!(out, "config {k} = {v}").unwrap();
        }
        for (p, h) in &self.inputs {
            writeln!(out, "input {p} sha256:{h}").unwrap();
        }
        for a in &self.artifacts {
            writeln!(out, "artifact {a}").unwrap();
        }
        out
    }

    /// True when `dir` holds this exact manifest and every artifact.
    pub fn is_current(&self, dir: &Path) -> bool {
        let Ok(existing) = fs::read_to_string(dir.join(MANIFEST_FILE)) else {
            return false;
        };
        existing == self.to_text() && self.artifacts.iter().all(|a| dir.join(a).exists())
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, self.to_text()).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    /// Drops a stale manifest before a run so an interrupted run never
    /// looks complete.
    pub fn clear(dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        if path.exists() {
            fs::remove_file(&path).with_context(|| format!("removing {}", path.display()))?;
        }
        Ok(())
    }
}
