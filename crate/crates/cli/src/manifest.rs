use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

/// Record of one invocation: what ran, on which inputs, producing what.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub args: serde_json::Value,
    pub seed: u64,
    pub inputs: Vec<InputDigest>,
    pub artifacts: Vec<PathBuf>,
    pub wall_time_s: f64,
    #[serde(skip)]
    started: Option<Instant>,
}

impl RunManifest {
    pub fn new(subcommand: &str, args: serde_json::Value, seed: u64) -> Self {
        Self {
            subcommand: subcommand.to_string(),
            args,
            seed,
            inputs: Vec::new(),
            artifacts: Vec::new(),
            wall_time_s: 0.0,
            started: Some(Instant::now()),
        }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs.push(InputDigest {
            path: path.to_path_buf(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        Ok(())
    }

    pub fn artifact(&mut self, path: impl Into<PathBuf>) {
        self.artifacts.push(path.into());
    }

    /// Stamp the wall time and write to `path`, or to stderr as one JSON
    /// line when no path is given.
    pub fn finish(mut self, path: Option<&Path>) -> Result<()> {
        if let Some(t) = self.started.take() {
            self.wall_time_s = t.elapsed().as_secs_f64();
        }
        match path {
            Some(p) => {
                let mut s = serde_json::to_string_pretty(&self)?;
                s.push('\n');
                std::fs::write(p, s).with_context(|| format!("writing {}", p.display()))?;
            }
            None => eprintln!("{}", serde_json::json!({ "manifest": self })),
        }
        Ok(())
    }
}
