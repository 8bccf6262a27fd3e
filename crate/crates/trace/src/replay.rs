//! Replays a trace through the client and an in-process store, one file
//! per snapshot, and records the store's counters after each snapshot.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reed_client::{Client, Identity, KeyingMode, UploadOptions};
use reed_core::chunker::SegmentationParams;
use reed_core::keygen::{KeyManager, ManagerKeyPair, RateLimit};
use reed_core::service::{LocalKeyService, StoreService, StoreStats};
use reed_core::{Error, Policy, Result, Scheme};
use reed_store::{DedupStore, StoreConfig};

use crate::trace::{synthesize_chunk, Trace};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// One key per chunk: exact deduplication.
    Chunk,
    /// One key per segment from its minimum fingerprint.
    Similarity,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "chunk" => Ok(Mode::Chunk),
            "similarity" => Ok(Mode::Similarity),
            other => Err(Error::InvalidConfig(format!("unknown mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Chunk => "chunk",
            Mode::Similarity => "similarity",
        })
    }
}

#[derive(Clone, Debug)]
pub struct ReplayParams {
    pub mode: Mode,
    pub segmentation: SegmentationParams,
    pub scheme: Scheme,
    pub filter_zero: bool,
    /// Store directory; a temporary one is used when unset.
    pub store_dir: Option<PathBuf>,
    /// Seeds the key manager and identity, so reruns are reproducible.
    pub seed: u64,
    pub manager_bits: usize,
}

impl Default for ReplayParams {
    fn default() -> Self {
        ReplayParams {
            mode: Mode::Similarity,
            segmentation: SegmentationParams::default(),
            scheme: Scheme::Enhanced,
            filter_zero: false,
            store_dir: None,
            seed: 0,
            manager_bits: 1024,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SnapshotRow {
    pub snapshot: String,
    pub chunks: usize,
    pub key_requests: u64,
    /// Cumulative store counters after this snapshot.
    pub stats: StoreStats,
}

impl SnapshotRow {
    pub fn saving(&self) -> f64 {
        self.stats.saving()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SavingsReport {
    pub mode: Mode,
    pub rows: Vec<SnapshotRow>,
}

impl SavingsReport {
    pub fn total(&self) -> StoreStats {
        self.rows.last().map(|r| r.stats).unwrap_or_default()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("snapshot\tlogical\tphysical\tstub\tsaving\n");
        for r in &self.rows {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{:.6}",
                r.snapshot,
                r.stats.logical_bytes,
                r.stats.physical_bytes,
                r.stats.stub_bytes,
                r.saving()
            )
            .unwrap();
        }
        out
    }
}

pub fn replay(trace: &Trace, params: &ReplayParams) -> Result<SavingsReport> {
    let filtered;
    let trace = if params.filter_zero {
        filtered = trace.without_zero_chunks();
        &filtered
    } else {
        trace
    };
    let tmp;
    let dir = match &params.store_dir {
        Some(d) => d.clone(),
        None => {
            tmp = tempfile::tempdir()?;
            tmp.path().to_path_buf()
        }
    };
    let store = Arc::new(DedupStore::open(&StoreConfig::under(&dir))?);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let manager = Arc::new(KeyManager::new(
        ManagerKeyPair::generate(&mut rng, params.manager_bits)?,
        RateLimit::unlimited(),
        reed_core::keygen::DEFAULT_BATCH_CAP,
    ));
    let user = "trace";
    let identity = Identity::generate(user, &mut rng, params.manager_bits)?;
    let options = UploadOptions {
        scheme: params.scheme,
        keying: match params.mode {
            Mode::Chunk => KeyingMode::PerChunk,
            Mode::Similarity => KeyingMode::Similarity(params.segmentation),
        },
        workers: 1,
        // replay measures storage, so the basic scheme is allowed here
        allow_basic_shared_keys: true,
        ..Default::default()
    };
    let client = Client::new(store.clone(), LocalKeyService::new(manager, user), identity, options)?;
    client.register()?;
    let policy = Policy::parse(user)?;

    let mut rows = Vec::with_capacity(trace.snapshots.len());
    for (i, snap) in trace.snapshots.iter().enumerate() {
        let chunks: Vec<Vec<u8>> = snap
            .records
            .iter()
            .map(|r| synthesize_chunk(&r.fingerprint, r.size as usize))
            .collect();
        let slices: Vec<&[u8]> = chunks.iter().map(Vec::as_slice).collect();
        let report = client.upload_chunks(&format!("snapshot-{i:06}"), &slices, &policy)?;
        rows.push(SnapshotRow {
            snapshot: snap.name.clone(),
            chunks: chunks.len(),
            key_requests: report.key_requests,
            stats: store.stats()?,
        });
    }
    Ok(SavingsReport {
        mode: params.mode,
        rows,
    })
}
