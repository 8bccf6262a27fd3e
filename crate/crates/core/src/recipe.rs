//! File identifiers and recipes.

use std::fmt;

use sha2::{Digest, Sha256};

use crate::chunker::Fingerprint;
use crate::codec::{Reader, Writer};
use crate::crypto::Scheme;
use crate::error::{Error, Result};

/// `SHA-256(owner || 0x00 || normalized path)`.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct FileId(pub [u8; 32]);

impl FileId {
    pub fn new(owner: &str, path: &str) -> Self {
        let mut h = Sha256::new();
        h.update(owner.as_bytes());
        h.update([0u8]);
        h.update(normalize_path(path).as_bytes());
        FileId(h.finalize().into())
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        let mut out = [0u8; 32];
        hex::decode_to_slice(s.trim(), &mut out).map_err(|_| Error::malformed(format!("bad file id {s:?}")))?;
        Ok(FileId(out))
    }
}

impl fmt::Debug for FileId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FileId({})", &self.to_hex()[..16])
    }
}

impl fmt::Display for FileId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Collapses repeated and trailing separators and `.` components so that
/// `a//b/./c/` and `a/b/c` name the same file. `..` is kept verbatim.
pub fn normalize_path(path: &str) -> String {
    let absolute = path.starts_with('/');
    let parts: Vec<&str> = path.split('/').filter(|p| !p.is_empty() && *p != ".").collect();
    let joined = parts.join("/");
    if absolute {
        format!("/{joined}")
    } else {
        joined
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RecipeEntry {
    pub fingerprint: Fingerprint,
    pub len: u32,
    pub segment: u32,
}

/// Ordered per-chunk metadata needed to rebuild a file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FileRecipe {
    pub id: FileId,
    pub path: String,
    pub size: u64,
    pub scheme: Scheme,
    /// Key-state version current when the recipe was written.
    pub key_version: u32,
    pub segment_count: u32,
    pub entries: Vec<RecipeEntry>,
}

const RECIPE_MAGIC: &[u8; 4] = b"RCP1";
const ENTRY_SIZE: usize = 32 + 4 + 4;

impl FileRecipe {
    pub fn chunk_count(&self) -> usize {
        self.entries.len()
    }

    pub fn validate(&self) -> Result<()> {
        let total: u64 = self.entries.iter().map(|e| e.len as u64).sum();
        if total != self.size {
            return Err(Error::malformed(format!(
                "recipe chunk lengths sum to {total}, file size is {}",
                self.size
            )));
        }
        if self.entries.iter().any(|e| e.len == 0 || e.segment >= self.segment_count.max(1)) {
            return Err(Error::malformed("recipe entry out of range"));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_capacity(64 + self.path.len() + self.entries.len() * ENTRY_SIZE);
        w.bytes(RECIPE_MAGIC);
        w.bytes(&self.id.0);
        w.str16(&self.path);
        w.u64(self.size);
        w.u64(self.entries.len() as u64);
        w.u8(self.scheme.id());
        w.u32(self.key_version);
        w.u32(self.segment_count);
        for e in &self.entries {
            w.bytes(e.fingerprint.as_bytes());
            w.u32(e.len);
            w.u32(e.segment);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if &r.array::<4>()? != RECIPE_MAGIC {
            return Err(Error::malformed("not a recipe"));
        }
        let id = FileId(r.array()?);
        let path = r.str16()?;
        let size = r.u64()?;
        let count = r.u64()? as usize;
        let scheme = Scheme::from_id(r.u8()?)?;
        let key_version = r.u32()?;
        let segment_count = r.u32()?;
        if r.remaining() != count.saturating_mul(ENTRY_SIZE) {
            return Err(Error::malformed("recipe entry count disagrees with length"));
        }
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            entries.push(RecipeEntry {
                fingerprint: Fingerprint(r.array()?),
                len: r.u32()?,
                segment: r.u32()?,
            });
        }
        let recipe = FileRecipe {
            id,
            path,
            size,
            scheme,
            key_version,
            segment_count,
            entries,
        };
        recipe.validate()?;
        Ok(recipe)
    }
}
