//! Id-addressed blobs on disk. Versioned objects live at
//! `<dir>/<id>/<version>.<ext>` with a `CURRENT` pointer file naming the
//! live version; every file is replaced atomically by write-and-rename.

use std::fs::{self, File};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};

use rand::RngCore;
use reed_core::{Error, FileId, Result};

/// Writes `bytes` to `path` so that readers see either the old or the new
/// content, and the new content survives a crash once this returns.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(".tmp-{:016x}", rand::thread_rng().next_u64()));
    let result = (|| {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        File::open(dir)?.sync_all()
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

/// Reads a file, mapping absence to `NotFound(what)`.
pub fn read_or_not_found(path: &Path, what: impl FnOnce() -> String) -> Result<Vec<u8>> {
    match fs::read(path) {
        Ok(b) => Ok(b),
        Err(e) if e.kind() == ErrorKind::NotFound => Err(Error::NotFound(what())),
        Err(e) => Err(e.into()),
    }
}

/// Versioned objects with a compare-and-set current pointer. Callers
/// serialize `put` per store.
#[derive(Debug, Clone)]
pub struct VersionedBlobs {
    dir: PathBuf,
    ext: &'static str,
    kind: &'static str,
}

impl VersionedBlobs {
    pub fn new(dir: PathBuf, ext: &'static str, kind: &'static str) -> Self {
        VersionedBlobs { dir, ext, kind }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn object_dir(&self, id: &FileId) -> PathBuf {
        self.dir.join(id.to_hex())
    }

    pub fn path(&self, id: &FileId, version: u32) -> PathBuf {
        self.object_dir(id).join(format!("{version}.{}", self.ext))
    }

    pub fn current(&self, id: &FileId) -> Result<Option<u32>> {
        match fs::read_to_string(self.object_dir(id).join("CURRENT")) {
            Ok(s) => s
                .trim()
                .parse()
                .map(Some)
                .map_err(|_| Error::StorageUnavailable(format!("corrupt CURRENT for {}", id.to_hex()))),
            Err(e) if e.kind() == ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Writes `version` and advances the pointer if it still equals
    /// `expected`. Versions never move backwards. Returns the size of the
    /// blob that was current before.
    pub fn put(&self, id: &FileId, expected: Option<u32>, version: u32, blob: &[u8]) -> Result<Option<u64>> {
        let actual = self.current(id)?;
        if actual != expected || expected.is_some_and(|e| version < e) {
            return Err(Error::VersionConflict { expected, actual });
        }
        let old = match actual {
            Some(v) => Some(fs::metadata(self.path(id, v))?.len()),
            None => None,
        };
        write_atomic(&self.path(id, version), blob)?;
        write_atomic(&self.object_dir(id).join("CURRENT"), version.to_string().as_bytes())?;
        Ok(old)
    }

    pub fn get(&self, id: &FileId, version: Option<u32>) -> Result<(u32, Vec<u8>)> {
        let version = match version {
            Some(v) => v,
            None => self
                .current(id)?
                .ok_or_else(|| Error::NotFound(format!("{} {}", self.kind, id.to_hex())))?,
        };
        let blob = read_or_not_found(&self.path(id, version), || {
            format!("{} {} version {version}", self.kind, id.to_hex())
        })?;
        Ok((version, blob))
    }

    /// `(id, size of current blob)` for every object.
    pub fn scan_current(&self) -> Result<Vec<(FileId, u64)>> {
        let mut out = Vec::new();
        let entries = match fs::read_dir(&self.dir) {
            Ok(e) => e,
            Err(e) if e.kind() == ErrorKind::NotFound => return Ok(out),
            Err(e) => return Err(e.into()),
        };
        for entry in entries {
            let name = entry?.file_name();
            let Ok(id) = FileId::from_hex(&name.to_string_lossy()) else {
                continue;
            };
            if let Some(v) = self.current(&id)? {
                out.push((id, fs::metadata(self.path(&id, v))?.len()));
            }
        }
        Ok(out)
    }
}
