//! Content-addressed stage artifacts with integrity sidecars.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::checkpoint::Checkpoint;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Short content key of any serializable value.
pub fn cache_key<T: Serialize>(value: &T) -> Result<String> {
    Ok(sha256_hex(&serde_json::to_vec(value)?)[..16].to_string())
}

pub fn pretty_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value)?;
    v.push(b'\n');
    Ok(v)
}

pub fn json_lines<T: Serialize>(items: &[T]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.push(b'\n');
    }
    Ok(out)
}

/// Artifact directory where every file `f` has a sidecar `f.sha256`.
pub struct ArtifactStore {
    dir: PathBuf,
}

impl ArtifactStore {
    pub fn open(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(ArtifactStore { dir: dir.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn exists(&self, name: &str) -> bool {
        self.path(name).exists() && self.path(&format!("{name}.sha256")).exists()
    }

    pub fn write(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let tmp = self.path(&format!("{name}.tmp"));
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, self.path(name))?;
        std::fs::write(self.path(&format!("{name}.sha256")), format!("{}\n", sha256_hex(bytes)))?;
        Ok(())
    }

    /// Reads an artifact, failing with a consistency error when its bytes no
    /// longer match the recorded hash.
    pub fn read(&self, name: &str) -> Result<Vec<u8>> {
        let bytes = std::fs::read(self.path(name))?;
        let recorded = std::fs::read_to_string(self.path(&format!("{name}.sha256")))?;
        if recorded.trim() != sha256_hex(&bytes) {
            return Err(Error::Consistency(format!("artifact {name} does not match its recorded checksum")));
        }
        Ok(bytes)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        self.write(name, &pretty_json(value)?)
    }

    pub fn read_json<T: DeserializeOwned>(&self, name: &str) -> Result<T> {
        Ok(serde_json::from_slice(&self.read(name)?)?)
    }

    pub fn write_checkpoint(&self, name: &str, ck: &Checkpoint) -> Result<()> {
        let mut buf = Vec::new();
        ck.write_to(&mut buf)?;
        self.write(name, &buf)
    }

    pub fn read_checkpoint(&self, name: &str) -> Result<Checkpoint> {
        Checkpoint::read_from(&mut self.read(name)?.as_slice())
    }
}
