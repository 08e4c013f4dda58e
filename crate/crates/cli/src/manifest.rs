use std::fs::File;
use std::io::{BufReader, Read};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Serialize)]
pub struct InputDigest {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Serialize)]
pub struct StageTiming {
    pub stage: String,
    pub wall_ms: u64,
}

/// Record written next to every run's artifacts.
#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub version: String,
    pub started_at: String,
    pub seeds: serde_json::Map<String, serde_json::Value>,
    pub config: serde_json::Value,
    pub inputs: Vec<InputDigest>,
    pub stages: Vec<StageTiming>,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        let features = if cfg!(feature = "parallel") { "parallel" } else { "sequential" };
        RunManifest {
            command: command.to_owned(),
            argv: std::env::args().collect(),
            version: format!("semkge {} ({features})", env!("CARGO_PKG_VERSION")),
            started_at: chrono::Local::now().to_rfc3339(),
            seeds: Default::default(),
            config: serde_json::Value::Null,
            inputs: Vec::new(),
            stages: Vec::new(),
        }
    }

    pub fn seed(&mut self, name: &str, seed: u64) {
        self.seeds.insert(name.to_owned(), seed.into());
    }

    pub fn digest_inputs<'a>(&mut self, paths: impl IntoIterator<Item = &'a Path>) -> Result<()> {
        for p in paths {
            self.inputs.push(InputDigest { path: p.to_owned(), sha256: sha256_file(p)? });
        }
        Ok(())
    }

    /// Runs `f` and records its wall time under `stage`.
    pub fn stage<T>(&mut self, stage: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let started = Instant::now();
        let out = f();
        self.stages.push(StageTiming { stage: stage.to_owned(), wall_ms: started.elapsed().as_millis() as u64 });
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_vec_pretty(self)?).with_context(|| format!("writing {}", path.display()))
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut reader = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = reader.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digest_of_known_content() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("abc.txt");
        std::fs::write(&p, b"abc").unwrap();
        assert_eq!(sha256_file(&p).unwrap(), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }
}
