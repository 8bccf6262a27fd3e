//! Text traces: one `fp_hex<TAB>size` record per line, snapshots separated
//! by lines starting with `#snapshot`. Anything after `#snapshot` on that
//! line names the snapshot. Blank lines are ignored.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reed_core::{Error, Result};

pub const MAX_CHUNK: u32 = 65_536;
/// Width of generated fingerprints, as in the public backup traces.
pub const GENERATED_FP_BYTES: usize = 6;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Record {
    pub fingerprint: Vec<u8>,
    pub size: u32,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Snapshot {
    pub name: String,
    pub records: Vec<Record>,
}

impl Snapshot {
    pub fn logical_bytes(&self) -> u64 {
        self.records.iter().map(|r| r.size as u64).sum()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Trace {
    pub snapshots: Vec<Snapshot>,
}

impl Trace {
    pub fn parse(text: &str) -> Result<Trace> {
        let mut snapshots: Vec<Snapshot> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            let err = |message: String| Error::TraceParse { line: i + 1, message };
            if let Some(rest) = line.strip_prefix("#snapshot") {
                let name = rest.trim();
                snapshots.push(Snapshot {
                    name: if name.is_empty() {
                        snapshots.len().to_string()
                    } else {
                        name.to_owned()
                    },
                    records: Vec::new(),
                });
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let (fp, size) = line
                .split_once('\t')
                .ok_or_else(|| err("expected fingerprint<TAB>size".into()))?;
            let fingerprint = hex::decode(fp.trim()).map_err(|e| err(format!("bad fingerprint: {e}")))?;
            if fingerprint.is_empty() {
                return Err(err("empty fingerprint".into()));
            }
            let size: u32 = size.trim().parse().map_err(|e| err(format!("bad size: {e}")))?;
            if !(1..=MAX_CHUNK).contains(&size) {
                return Err(err(format!("size {size} outside 1..={MAX_CHUNK}")));
            }
            if snapshots.is_empty() {
                // records before any header form an unnamed first snapshot
                snapshots.push(Snapshot {
                    name: "0".into(),
                    records: Vec::new(),
                });
            }
            snapshots.last_mut().expect("pushed above").records.push(Record { fingerprint, size });
        }
        Ok(Trace { snapshots })
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for s in &self.snapshots {
            writeln!(out, "#snapshot {}", s.name).unwrap();
            for r in &s.records {
                writeln!(out, "{}\t{}", hex::encode(&r.fingerprint), r.size).unwrap();
            }
        }
        out
    }

    pub fn chunk_count(&self) -> usize {
        self.snapshots.iter().map(|s| s.records.len()).sum()
    }

    /// Drops records whose synthesized chunk is all zeros.
    pub fn without_zero_chunks(&self) -> Trace {
        Trace {
            snapshots: self
                .snapshots
                .iter()
                .map(|s| Snapshot {
                    name: s.name.clone(),
                    records: s.records.iter().filter(|r| !is_zero_record(r)).cloned().collect(),
                })
                .collect(),
        }
    }
}

pub fn is_zero_record(r: &Record) -> bool {
    r.fingerprint.iter().all(|&b| b == 0)
}

/// Chunk content for a trace record: the fingerprint repeated up to `size`.
pub fn synthesize_chunk(fingerprint: &[u8], size: usize) -> Vec<u8> {
    assert!(!fingerprint.is_empty() && size >= 1);
    fingerprint.iter().copied().cycle().take(size).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenParams {
    pub seed: u64,
    pub snapshots: usize,
    pub chunks: usize,
    /// Fraction of chunks replaced in each snapshot after the first.
    pub mutate: f64,
    pub avg_chunk: u32,
    /// Number of contiguous runs the replaced chunks are split into.
    pub runs: usize,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            seed: 0,
            snapshots: 10,
            chunks: 1024,
            mutate: 0.1,
            avg_chunk: 8192,
            runs: 1,
        }
    }
}

struct FreshFingerprints {
    rng: ChaCha8Rng,
    seen: HashSet<[u8; GENERATED_FP_BYTES]>,
}

impl FreshFingerprints {
    fn next(&mut self) -> Vec<u8> {
        loop {
            let mut fp = [0u8; GENERATED_FP_BYTES];
            self.rng.fill(&mut fp[..]);
            if fp != [0; GENERATED_FP_BYTES] && self.seen.insert(fp) {
                return fp.to_vec();
            }
        }
    }
}

/// Seeded synthetic trace. Each snapshot after the first copies its
/// predecessor and replaces exactly `round(mutate * chunks)` records,
/// spread over `runs` disjoint contiguous runs, with never-seen
/// fingerprints of the same size. Sizes are uniform in [avg/2, 3avg/2].
pub fn generate_trace(p: &GenParams) -> Result<Trace> {
    if !(0.0..=1.0).contains(&p.mutate) {
        return Err(Error::InvalidConfig(format!("mutation rate {} outside [0, 1]", p.mutate)));
    }
    if p.avg_chunk < 2 || p.avg_chunk + p.avg_chunk / 2 > MAX_CHUNK {
        return Err(Error::InvalidConfig(format!("average chunk size {} out of range", p.avg_chunk)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let mut fresh = FreshFingerprints {
        rng: ChaCha8Rng::seed_from_u64(p.seed ^ FINGERPRINT_STREAM),
        seen: HashSet::new(),
    };
    let (lo, hi) = (p.avg_chunk / 2, p.avg_chunk + p.avg_chunk / 2);
    let mut current: Vec<Record> = (0..p.chunks)
        .map(|_| Record {
            fingerprint: fresh.next(),
            size: rng.gen_range(lo..=hi),
        })
        .collect();
    let changed = (p.mutate * p.chunks as f64).round() as usize;
    // inner gaps need at least one untouched record each
    let runs = p.runs.clamp(1, changed.max(1)).min(p.chunks - changed + 1);

    let mut snapshots = Vec::with_capacity(p.snapshots);
    for i in 0..p.snapshots {
        if i > 0 && changed > 0 {
            for range in run_layout(&mut rng, p.chunks, changed, runs) {
                for r in &mut current[range] {
                    r.fingerprint = fresh.next();
                }
            }
        }
        snapshots.push(Snapshot {
            name: i.to_string(),
            records: current.clone(),
        });
    }
    Ok(Trace { snapshots })
}

const FINGERPRINT_STREAM: u64 = 0x5eed_f1e9;

/// Places `runs` disjoint runs totalling `changed` items in `0..n`.
fn run_layout(rng: &mut ChaCha8Rng, n: usize, changed: usize, runs: usize) -> Vec<std::ops::Range<usize>> {
    // run lengths differ by at most one
    let lens: Vec<usize> = (0..runs).map(|k| changed / runs + usize::from(k < changed % runs)).collect();
    let free = n - changed - (runs - 1);
    let mut cuts: Vec<usize> = (0..runs).map(|_| rng.gen_range(0..=free)).collect();
    cuts.sort_unstable();
    let mut out = Vec::with_capacity(runs);
    let mut pos = cuts[0];
    for k in 0..runs {
        if k > 0 {
            pos += cuts[k] - cuts[k - 1] + 1;
        }
        out.push(pos..pos + lens[k]);
        pos += lens[k];
    }
    out
}
