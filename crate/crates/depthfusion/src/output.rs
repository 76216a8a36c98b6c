//! Output directory with atomic writes and content hashing.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{AppError, Result};

#[derive(Debug, Clone)]
pub struct OutputDir {
    root: PathBuf,
}

impl OutputDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Writes to a sibling temp file, syncs, then renames over `rel`.
    pub fn write(&self, rel: &str, bytes: &[u8]) -> Result<()> {
        let dst = self.path(rel);
        let dir = dst.parent().unwrap_or(&self.root);
        fs::create_dir_all(dir)?;
        let name = dst
            .file_name()
            .ok_or_else(|| AppError::Config(format!("output path {rel:?} has no file name")))?;
        let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, &dst)?;
        Ok(())
    }

    pub fn write_json<T: Serialize + ?Sized>(&self, rel: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(rel, &bytes)
    }

    pub fn write_csv<T: Serialize>(&self, rel: &str, rows: &[T]) -> Result<()> {
        self.write(rel, &csv_bytes(rows)?)
    }
}

pub fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| AppError::Format(e.to_string()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// `(relative path, sha256)` for every file under `root`, sorted by path.
pub fn tree_digest(root: &Path) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(|e| AppError::Io(e.into()))?;
        if entry.file_type().is_file() {
            let rel = entry.path().strip_prefix(root).expect("walked below root");
            let rel = rel.to_string_lossy().replace('\\', "/");
            out.push((rel, sha256_hex(&fs::read(entry.path())?)));
        }
    }
    out.sort();
    Ok(out)
}

/// Single digest over [`tree_digest`].
pub fn tree_hash(root: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for (rel, digest) in tree_digest(root)? {
        h.update(rel.as_bytes());
        h.update([0]);
        h.update(digest.as_bytes());
        h.update([b'\n']);
    }
    Ok(hex::encode(h.finalize()))
}
