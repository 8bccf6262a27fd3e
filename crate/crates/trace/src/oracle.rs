//! Brute-force expectation for a replay, without any cryptography: each
//! chunk's key is named by the fingerprint its segment would be keyed
//! with, and a stored package is a distinct (chunk, key) pair.

use std::collections::HashSet;

use reed_core::chunker::{self, ChunkRef, SegmentationParams};
use reed_core::crypto::{STUB_SIZE, STUB_FILE_OVERHEAD};
use reed_core::Fingerprint;

use crate::replay::Mode;
use crate::trace::{synthesize_chunk, Trace};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Expected {
    pub logical: u64,
    pub physical: u64,
    pub stub: u64,
    pub stored_packages: u64,
}

/// Cumulative expectation after each snapshot.
pub fn expected(trace: &Trace, mode: Mode, params: &SegmentationParams) -> Vec<Expected> {
    let mut seen: HashSet<(Fingerprint, Fingerprint)> = HashSet::new();
    let mut acc = Expected::default();
    let mut out = Vec::with_capacity(trace.snapshots.len());
    for snap in &trace.snapshots {
        let refs: Vec<ChunkRef> = snap
            .records
            .iter()
            .map(|r| ChunkRef {
                fingerprint: Fingerprint::of(&synthesize_chunk(&r.fingerprint, r.size as usize)),
                len: r.size as u64,
            })
            .collect();
        let mut key_of = vec![Fingerprint([0; 32]); refs.len()];
        match mode {
            Mode::Chunk => {
                for (k, r) in key_of.iter_mut().zip(&refs) {
                    *k = r.fingerprint;
                }
            }
            Mode::Similarity => {
                // scan each segment for its minimum directly
                for seg in chunker::segment(&refs, params) {
                    let mut min = refs[seg.chunks.start].fingerprint;
                    for r in &refs[seg.chunks.clone()] {
                        if r.fingerprint.0 < min.0 {
                            min = r.fingerprint;
                        }
                    }
                    key_of[seg.chunks].iter_mut().for_each(|k| *k = min);
                }
            }
        }
        for (r, k) in refs.iter().zip(key_of) {
            acc.logical += r.len;
            // trimmed package length equals chunk length
            if seen.insert((r.fingerprint, k)) {
                acc.physical += r.len;
                acc.stored_packages += 1;
            }
        }
        acc.stub += (STUB_SIZE * refs.len() + STUB_FILE_OVERHEAD) as u64;
        out.push(acc);
    }
    out
}
