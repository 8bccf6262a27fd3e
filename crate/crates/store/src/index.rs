//! Fingerprint index: an in-memory table backed by an append-only log of
//! fixed 44-byte records `fp(32) || container(4) || offset(4) || len(4)`.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::Path;

use reed_core::{Fingerprint, Result};

pub const RECORD_SIZE: usize = 44;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Location {
    pub container: u32,
    pub offset: u32,
    pub len: u32,
}

#[derive(Debug)]
pub struct FingerprintIndex {
    table: HashMap<Fingerprint, Location>,
    log: File,
    bytes: u64,
}

fn encode(fp: &Fingerprint, loc: &Location) -> [u8; RECORD_SIZE] {
    let mut rec = [0u8; RECORD_SIZE];
    rec[..32].copy_from_slice(fp.as_bytes());
    rec[32..36].copy_from_slice(&loc.container.to_be_bytes());
    rec[36..40].copy_from_slice(&loc.offset.to_be_bytes());
    rec[40..44].copy_from_slice(&loc.len.to_be_bytes());
    rec
}

fn decode(rec: &[u8]) -> (Fingerprint, Location) {
    let word = |i: usize| u32::from_be_bytes(rec[i..i + 4].try_into().expect("4 bytes"));
    (
        Fingerprint(rec[..32].try_into().expect("32 bytes")),
        Location {
            container: word(32),
            offset: word(36),
            len: word(40),
        },
    )
}

impl FingerprintIndex {
    /// Loads the log, dropping a torn trailing record left by a crash.
    pub fn open(path: &Path) -> Result<Self> {
        let mut log = OpenOptions::new().create(true).read(true).append(true).open(path)?;
        let mut raw = Vec::new();
        log.read_to_end(&mut raw)?;
        let whole = raw.len() - raw.len() % RECORD_SIZE;
        if whole != raw.len() {
            log::warn!("index log has a torn record; truncating {} bytes", raw.len() - whole);
            log.set_len(whole as u64)?;
            log.sync_all()?;
        }
        let mut table = HashMap::with_capacity(whole / RECORD_SIZE);
        let mut bytes = 0;
        for rec in raw[..whole].chunks_exact(RECORD_SIZE) {
            let (fp, loc) = decode(rec);
            if table.insert(fp, loc).is_none() {
                bytes += loc.len as u64;
            }
        }
        Ok(FingerprintIndex { table, log, bytes })
    }

    pub fn get(&self, fp: &Fingerprint) -> Option<Location> {
        self.table.get(fp).copied()
    }

    pub fn contains(&self, fp: &Fingerprint) -> bool {
        self.table.contains_key(fp)
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    /// Sum of indexed package lengths.
    pub fn bytes(&self) -> u64 {
        self.bytes
    }

    /// Largest end offset referenced in each container.
    pub fn extents(&self) -> HashMap<u32, u64> {
        let mut out: HashMap<u32, u64> = HashMap::new();
        for loc in self.table.values() {
            let end = loc.offset as u64 + loc.len as u64;
            let e = out.entry(loc.container).or_default();
            *e = (*e).max(end);
        }
        out
    }

    /// Appends new entries and syncs the log. Entries must be new.
    pub fn commit(&mut self, entries: &[(Fingerprint, Location)]) -> Result<()> {
        if entries.is_empty() {
            return Ok(());
        }
        let mut buf = Vec::with_capacity(entries.len() * RECORD_SIZE);
        for (fp, loc) in entries {
            debug_assert!(!self.table.contains_key(fp));
            buf.extend_from_slice(&encode(fp, loc));
        }
        self.log.write_all(&buf)?;
        self.log.sync_data()?;
        for (fp, loc) in entries {
            self.table.insert(*fp, *loc);
            self.bytes += loc.len as u64;
        }
        Ok(())
    }
}
