//! Client configuration file and the upload options derived from it.
//!
//! ```toml
//! server = "127.0.0.1:7400"
//! manager = "127.0.0.1:7401"
//! identity = "alice.json"
//! scheme = "enhanced"
//! workers = 2
//!
//! [chunk]
//! mode = "rabin"      # or "fixed"
//! avg_size = 8192
//!
//! [segment]
//! avg_size = 1048576
//! keying = "similarity"  # or "chunk"
//! ```

use std::path::{Path, PathBuf};

use reed_core::chunker::{ChunkingMode, ChunkingParams, SegmentationParams};
use reed_core::{Error, Result, Scheme};
use serde::{Deserialize, Serialize};

/// Largest package batch sent in one message.
pub const DEFAULT_BATCH_BYTES: usize = 4 * 1024 * 1024;
pub const DEFAULT_WORKERS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KeyingMode {
    /// One key per segment, derived from its minimum fingerprint.
    Similarity(SegmentationParams),
    /// One key per chunk.
    PerChunk,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UploadOptions {
    pub scheme: Scheme,
    pub chunking: ChunkingParams,
    pub keying: KeyingMode,
    pub workers: usize,
    pub batch_bytes: usize,
    /// The basic scheme reveals the XOR of plaintexts that share a key, so
    /// it is refused under segment keys unless this is set.
    pub allow_basic_shared_keys: bool,
}

impl Default for UploadOptions {
    fn default() -> Self {
        UploadOptions {
            scheme: Scheme::Enhanced,
            chunking: ChunkingParams::default(),
            keying: KeyingMode::Similarity(SegmentationParams::default()),
            workers: DEFAULT_WORKERS,
            batch_bytes: DEFAULT_BATCH_BYTES,
            allow_basic_shared_keys: false,
        }
    }
}

impl UploadOptions {
    pub fn validate(&self) -> Result<()> {
        self.chunking.validate()?;
        if self.workers == 0 {
            return Err(Error::InvalidConfig("workers must be at least 1".into()));
        }
        if self.batch_bytes == 0 {
            return Err(Error::InvalidConfig("batch size must be positive".into()));
        }
        if self.scheme == Scheme::Basic
            && matches!(self.keying, KeyingMode::Similarity(_))
            && !self.allow_basic_shared_keys
        {
            return Err(Error::InvalidConfig(
                "the basic scheme leaks plaintext XORs between chunks that share a segment key; \
                 use the enhanced scheme or per-chunk keying"
                    .into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChunkSection {
    #[serde(default = "default_chunk_mode")]
    pub mode: String,
    #[serde(default = "default_avg_chunk")]
    pub avg_size: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentSection {
    #[serde(default = "default_avg_segment")]
    pub avg_size: u64,
    #[serde(default = "default_keying")]
    pub keying: String,
}

fn default_chunk_mode() -> String {
    "rabin".into()
}
fn default_avg_chunk() -> usize {
    8192
}
fn default_avg_segment() -> u64 {
    1 << 20
}
fn default_keying() -> String {
    "similarity".into()
}
fn default_scheme() -> String {
    "enhanced".into()
}
fn default_workers() -> usize {
    DEFAULT_WORKERS
}

impl Default for ChunkSection {
    fn default() -> Self {
        ChunkSection {
            mode: default_chunk_mode(),
            avg_size: default_avg_chunk(),
        }
    }
}

impl Default for SegmentSection {
    fn default() -> Self {
        SegmentSection {
            avg_size: default_avg_segment(),
            keying: default_keying(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClientConfig {
    pub server: String,
    pub manager: String,
    pub identity: PathBuf,
    #[serde(default = "default_scheme")]
    pub scheme: String,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub chunk: ChunkSection,
    #[serde(default)]
    pub segment: SegmentSection,
}

impl ClientConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// Reads a config file; a relative identity path is taken relative to
    /// the file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("config {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        if cfg.identity.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.identity = dir.join(&cfg.identity);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Chunking for an average size: min is a quarter and max twice the
    /// average, as in the defaults.
    pub fn chunking(&self) -> Result<ChunkingParams> {
        let avg = self.chunk.avg_size;
        let params = match self.chunk.mode.as_str() {
            "rabin" => ChunkingParams::rabin(avg / 4, avg, avg * 2),
            "fixed" => ChunkingParams::fixed(avg),
            other => return Err(Error::InvalidConfig(format!("unknown chunk mode {other:?}"))),
        };
        params.validate()?;
        Ok(params)
    }

    pub fn upload_options(&self) -> Result<UploadOptions> {
        let chunking = self.chunking()?;
        let avg_chunk = match chunking.mode {
            ChunkingMode::Fixed => chunking.fixed_size,
            ChunkingMode::Rabin => chunking.avg_size,
        } as u64;
        let keying = match self.segment.keying.as_str() {
            "similarity" => KeyingMode::Similarity(SegmentationParams::new(self.segment.avg_size, avg_chunk)),
            "chunk" => KeyingMode::PerChunk,
            other => return Err(Error::InvalidConfig(format!("unknown keying {other:?}"))),
        };
        let opts = UploadOptions {
            scheme: self.scheme.parse()?,
            chunking,
            keying,
            workers: self.workers,
            ..Default::default()
        };
        opts.validate()?;
        Ok(opts)
    }
}
