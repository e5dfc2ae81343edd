//! Run manifests: what a command read, what it wrote, and with which settings.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use eos_core::kv::KvMap;
use eos_core::neural::write_atomic;
use sha2::{Digest, Sha256};

use crate::CliError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug)]
pub struct RunManifest {
    pub command: String,
    pub version: &'static str,
    pub seeds: Vec<(String, u64)>,
    pub config: Vec<(String, String)>,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub timings: Vec<(String, f64)>,
    started: Instant,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        RunManifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION"),
            seeds: Vec::new(),
            config: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings: Vec::new(),
            started: Instant::now(),
        }
    }

    pub fn seed(&mut self, name: &str, value: u64) {
        self.seeds.push((name.to_string(), value));
    }

    pub fn config(&mut self, prefix: &str, kv: &KvMap) {
        for line in kv.to_text().lines() {
            if let Some((k, v)) = line.split_once(" = ") {
                self.config.push((format!("{prefix}.{k}"), v.to_string()));
            }
        }
    }

    pub fn input(&mut self, role: &str, path: &Path, bytes: &[u8]) {
        self.inputs.push(Artifact {
            role: role.to_string(),
            path: path.to_path_buf(),
            sha256: sha256_hex(bytes),
        });
    }

    /// Writes an artifact atomically and records its hash.
    pub fn write(&mut self, role: &str, path: &Path, bytes: &[u8]) -> Result<(), CliError> {
        write_atomic(path, bytes).map_err(|e| CliError::io(path, e))?;
        self.outputs.push(Artifact {
            role: role.to_string(),
            path: path.to_path_buf(),
            sha256: sha256_hex(bytes),
        });
        Ok(())
    }

    pub fn lap(&mut self, phase: &str, seconds: f64) {
        self.timings.push((phase.to_string(), seconds));
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "command = {}", self.command);
        let _ = writeln!(out, "version = {}", self.version);
        for (k, v) in &self.seeds {
            let _ = writeln!(out, "seed.{k} = {v}");
        }
        for (k, v) in &self.config {
            let _ = writeln!(out, "config.{k} = {v}");
        }
        for a in &self.inputs {
            let _ = writeln!(out, "input.{} = {} sha256={}", a.role, a.path.display(), a.sha256);
        }
        for a in &self.outputs {
            let _ = writeln!(out, "output.{} = {} sha256={}", a.role, a.path.display(), a.sha256);
        }
        for (k, v) in &self.timings {
            let _ = writeln!(out, "seconds.{k} = {v:.3}");
        }
        let _ = writeln!(out, "seconds.total = {:.3}", self.started.elapsed().as_secs_f64());
        out
    }

    /// Writes `manifest.txt` into `dir`, after every other artifact.
    pub fn finish(self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join("manifest.txt");
        write_atomic(&path, self.to_text().as_bytes()).map_err(|e| CliError::io(&path, e))
    }
}
