//! Output-directory lifecycle: lock for the run's duration, then leave a
//! provenance record tying artifacts to the exact config and seed.

use crate::config::RunConfig;
use prunekit_core::io::text::write_json;
use prunekit_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

pub const PROVENANCE_SCHEMA: &str = "prunekit-provenance-v1";
pub const LOCK_NAME: &str = ".prunekit-lock";

/// Holds the lock file for as long as the run lives; Drop releases it on
/// every in-process exit path, so only a hard kill leaves a stale lock.
pub struct OutDir {
    pub path: PathBuf,
    lock: PathBuf,
}

impl OutDir {
    pub fn acquire(path: &Path) -> Result<Self> {
        fs::create_dir_all(path)
            .map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
        let lock = path.join(LOCK_NAME);
        match fs::OpenOptions::new().write(true).create_new(true).open(&lock) {
            Ok(_) => Ok(OutDir { path: path.to_path_buf(), lock }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Io {
                path: lock,
                source: std::io::Error::new(
                    std::io::ErrorKind::AlreadyExists,
                    "output directory is locked by another run (stale lock? delete it)",
                ),
            }),
            Err(e) => Err(Error::Io { path: lock, source: e }),
        }
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }
}

impl Drop for OutDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.lock);
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub schema: String,
    pub command: String,
    pub seed: u64,
    /// SHA-256 of the resolved config (after flag overrides), hex.
    pub config_sha256: String,
    /// artifact file name → SHA-256 hex of its bytes.
    pub artifacts: BTreeMap<String, String>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

pub fn config_hash(cfg: &RunConfig) -> Result<String> {
    let text = toml::to_string(cfg)
        .map_err(|e| Error::config(format!("config not serializable: {e}")))?;
    Ok(sha256_hex(text.as_bytes()))
}

/// Hash every artifact and drop provenance.json next to them.
pub fn write_provenance(
    out: &OutDir,
    command: &str,
    cfg: &RunConfig,
    artifact_names: &[&str],
) -> Result<()> {
    let mut artifacts = BTreeMap::new();
    for name in artifact_names {
        let path = out.file(name);
        let bytes =
            fs::read(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
        artifacts.insert((*name).to_string(), sha256_hex(&bytes));
    }
    let record = Provenance {
        schema: PROVENANCE_SCHEMA.to_string(),
        command: command.to_string(),
        seed: cfg.seed,
        config_sha256: config_hash(cfg)?,
        artifacts,
    };
    write_json(&record, out.file("provenance.json"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    #[test]
    fn lock_is_exclusive_and_released() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("run");
        let first = OutDir::acquire(&path).unwrap();
        let second = OutDir::acquire(&path);
        assert!(second.is_err());
        drop(first);
        let third = OutDir::acquire(&path).unwrap();
        drop(third);
        assert!(!path.join(LOCK_NAME).exists());
    }

    #[test]
    fn provenance_is_deterministic() {
        let dir = TempDir::new().unwrap();
        let out = OutDir::acquire(dir.path().join("run").as_path()).unwrap();
        std::fs::write(out.file("a.bin"), b"hello").unwrap();
        let cfg: RunConfig =
            toml::from_str("schema = \"prunekit-run-v1\"\nseed = 7\n").unwrap();
        write_provenance(&out, "train", &cfg, &["a.bin"]).unwrap();
        let one = std::fs::read(out.file("provenance.json")).unwrap();
        write_provenance(&out, "train", &cfg, &["a.bin"]).unwrap();
        let two = std::fs::read(out.file("provenance.json")).unwrap();
        assert_eq!(one, two);
        let parsed: Provenance = serde_json::from_slice(&one).unwrap();
        // known SHA-256 of "hello"
        assert_eq!(
            parsed.artifacts["a.bin"],
            "2cf24dba5fb0a30e26e83b2ac5b9e29e1b161e5c1fa7425e73043362938b9824"
        );
    }
}
