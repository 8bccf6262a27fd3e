//! Chunking, fingerprinting and similarity segmentation.
//!
//! Files are cut into fixed-size or content-defined chunks. Content-defined
//! cut points come from a Rabin fingerprint over a sliding window, so they
//! depend only on nearby bytes and resynchronise after an insertion. Chunk
//! streams are then grouped into variable-size segments whose boundaries are
//! chosen from the chunk fingerprints alone; each segment is keyed by its
//! minimum fingerprint.

use std::fmt;
use std::ops::Range;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// SHA-256 digest of a chunk. Ordering is big-endian numeric order.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Fingerprint(pub [u8; 32]);

impl Fingerprint {
    pub fn of(data: &[u8]) -> Self {
        Fingerprint(Sha256::digest(data).into())
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        let bytes = hex::decode(s).map_err(|e| Error::malformed(format!("fingerprint hex: {e}")))?;
        let arr: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::malformed("fingerprint must be 32 bytes"))?;
        Ok(Fingerprint(arr))
    }

    /// Remainder of the digest, read as a big-endian integer, modulo `divisor`.
    pub fn rem(&self, divisor: u64) -> u64 {
        debug_assert!(divisor > 0);
        let d = u128::from(divisor);
        let mut r: u128 = 0;
        for &b in &self.0 {
            r = ((r << 8) | u128::from(b)) % d;
        }
        r as u64
    }
}

impl fmt::Debug for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Fingerprint({})", &self.to_hex()[..16])
    }
}

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// SHA-256 of the chunk data.
pub fn fingerprint(chunk: &[u8]) -> Fingerprint {
    Fingerprint::of(chunk)
}

/// A chunk borrowed from the input buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Chunk<'a> {
    pub offset: usize,
    pub data: &'a [u8],
}

impl<'a> Chunk<'a> {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.data.len()
    }
}

fn chunks_from_cuts<'a>(data: &'a [u8], cuts: &[usize]) -> Vec<Chunk<'a>> {
    let mut start = 0;
    cuts.iter()
        .map(|&end| {
            let c = Chunk {
                offset: start,
                data: &data[start..end],
            };
            start = end;
            c
        })
        .collect()
}

/// Splits `data` into `size`-byte chunks; the last one may be shorter.
pub fn fixed_chunk(data: &[u8], size: usize) -> Vec<Chunk<'_>> {
    assert!(size >= 1, "chunk size must be at least one byte");
    data.chunks(size)
        .enumerate()
        .map(|(i, d)| Chunk {
            offset: i * size,
            data: d,
        })
        .collect()
}

/// Irreducible polynomial of degree 53 over GF(2) used by the Rabin
/// fingerprint. Both ends of a deployment must agree on it, so it is tied
/// to [`RABIN_VERSION`].
pub const RABIN_POLYNOMIAL: u64 = 0x003D_A335_8B4D_C173;
/// Version tag of the (polynomial, window) pair; recorded in configs.
pub const RABIN_VERSION: u32 = 1;
pub const DEFAULT_WINDOW: usize = 48;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ChunkingMode {
    Fixed,
    Rabin,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChunkingParams {
    pub mode: ChunkingMode,
    pub fixed_size: usize,
    pub min_size: usize,
    pub avg_size: usize,
    pub max_size: usize,
    pub window: usize,
    pub polynomial: u64,
}

impl Default for ChunkingParams {
    fn default() -> Self {
        ChunkingParams {
            mode: ChunkingMode::Rabin,
            fixed_size: 8192,
            min_size: 2048,
            avg_size: 8192,
            max_size: 16384,
            window: DEFAULT_WINDOW,
            polynomial: RABIN_POLYNOMIAL,
        }
    }
}

impl ChunkingParams {
    pub fn fixed(size: usize) -> Self {
        ChunkingParams {
            mode: ChunkingMode::Fixed,
            fixed_size: size,
            ..Default::default()
        }
    }

    pub fn rabin(min_size: usize, avg_size: usize, max_size: usize) -> Self {
        ChunkingParams {
            mode: ChunkingMode::Rabin,
            min_size,
            avg_size,
            max_size,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.mode {
            ChunkingMode::Fixed if self.fixed_size == 0 => {
                Err(Error::InvalidConfig("fixed chunk size must be >= 1".into()))
            }
            ChunkingMode::Fixed => Ok(()),
            ChunkingMode::Rabin => {
                if !(self.min_size <= self.avg_size && self.avg_size <= self.max_size) {
                    return Err(Error::InvalidConfig(format!(
                        "chunk sizes must satisfy min <= avg <= max (got {}/{}/{})",
                        self.min_size, self.avg_size, self.max_size
                    )));
                }
                if self.window == 0 || self.min_size < self.window {
                    return Err(Error::InvalidConfig(format!(
                        "minimum chunk size {} is smaller than the rolling window {}",
                        self.min_size, self.window
                    )));
                }
                if poly_degree(self.polynomial) < 16 || poly_degree(self.polynomial) > 55 {
                    return Err(Error::InvalidConfig("rabin polynomial degree must be in 16..=55".into()));
                }
                Ok(())
            }
        }
    }

    /// Low-bit mask tested against the rolling hash.
    pub fn boundary_mask(&self) -> u64 {
        (self.avg_size.max(1).next_power_of_two() as u64) - 1
    }
}

/// Chunks `data` according to `params.mode`.
pub fn chunk<'a>(data: &'a [u8], params: &ChunkingParams) -> Result<Vec<Chunk<'a>>> {
    params.validate()?;
    Ok(match params.mode {
        ChunkingMode::Fixed => fixed_chunk(data, params.fixed_size),
        ChunkingMode::Rabin => RabinChunker::new(params)?.chunk(data),
    })
}

/// Content-defined chunking with Rabin fingerprints.
pub fn rabin_chunk<'a>(data: &'a [u8], params: &ChunkingParams) -> Result<Vec<Chunk<'a>>> {
    Ok(RabinChunker::new(params)?.chunk(data))
}

fn poly_degree(p: u64) -> u32 {
    63 - p.leading_zeros()
}

/// `x mod p` over GF(2).
fn poly_mod(mut x: u64, p: u64) -> u64 {
    let dp = poly_degree(p);
    while x != 0 && poly_degree(x) >= dp {
        x ^= p << (poly_degree(x) - dp);
    }
    x
}

fn append_byte(hash: u64, b: u8, p: u64) -> u64 {
    poly_mod((hash << 8) | u64::from(b), p)
}

/// Rolling Rabin fingerprint chunker. Tables are derived once from the
/// polynomial and window size.
#[derive(Clone)]
pub struct RabinChunker {
    min: usize,
    max: usize,
    window: usize,
    mask: u64,
    shift: u32,
    out_table: [u64; 256],
    mod_table: [u64; 256],
}

impl fmt::Debug for RabinChunker {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RabinChunker")
            .field("min", &self.min)
            .field("max", &self.max)
            .field("window", &self.window)
            .field("mask", &self.mask)
            .finish()
    }
}

impl RabinChunker {
    pub fn new(params: &ChunkingParams) -> Result<Self> {
        let mut p = params.clone();
        p.mode = ChunkingMode::Rabin;
        p.validate()?;
        let pol = p.polynomial;
        let k = poly_degree(pol);

        let mut out_table = [0u64; 256];
        for (b, slot) in out_table.iter_mut().enumerate() {
            let mut h = append_byte(0, b as u8, pol);
            for _ in 0..p.window - 1 {
                h = append_byte(h, 0, pol);
            }
            *slot = h;
        }
        let mut mod_table = [0u64; 256];
        for (b, slot) in mod_table.iter_mut().enumerate() {
            let shifted = (b as u64) << k;
            *slot = poly_mod(shifted, pol) | shifted;
        }

        Ok(RabinChunker {
            min: p.min_size,
            max: p.max_size,
            window: p.window,
            mask: p.boundary_mask(),
            shift: k - 8,
            out_table,
            mod_table,
        })
    }

    /// End offsets of every chunk; the last equals `data.len()`.
    pub fn cut_points(&self, data: &[u8]) -> Vec<usize> {
        let mut cuts = Vec::with_capacity(data.len() / self.min.max(1) + 1);
        let mut window = vec![0u8; self.window];
        let mut start = 0;
        while start < data.len() {
            if data.len() - start <= self.min {
                cuts.push(data.len());
                break;
            }
            let end_max = (start + self.max).min(data.len());
            window.iter_mut().for_each(|b| *b = 0);
            let mut wpos = 0;
            let mut digest = 0u64;
            let mut i = start + self.min - self.window;
            let mut slide = |digest: &mut u64, b: u8| {
                let out = window[wpos];
                window[wpos] = b;
                wpos = (wpos + 1) % self.window;
                *digest ^= self.out_table[out as usize];
                let index = (*digest >> self.shift) as usize;
                *digest = ((*digest << 8) | u64::from(b)) ^ self.mod_table[index];
            };
            while i < start + self.min {
                slide(&mut digest, data[i]);
                i += 1;
            }
            let cut = loop {
                if digest & self.mask == 0 || i >= end_max {
                    break i;
                }
                slide(&mut digest, data[i]);
                i += 1;
            };
            cuts.push(cut);
            start = cut;
        }
        cuts
    }

    pub fn chunk<'a>(&self, data: &'a [u8]) -> Vec<Chunk<'a>> {
        chunks_from_cuts(data, &self.cut_points(data))
    }
}

/// Length and fingerprint of one chunk in a stream, the only inputs
/// segmentation looks at.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChunkRef {
    pub fingerprint: Fingerprint,
    pub len: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegmentationParams {
    pub avg_size: u64,
    pub min_size: u64,
    pub max_size: u64,
    pub divisor: u64,
}

impl SegmentationParams {
    /// Minimum and maximum are half and double the average; the divisor is
    /// the expected number of chunks per segment.
    pub fn new(avg_segment: u64, avg_chunk: u64) -> Self {
        let divisor = avg_segment.div_ceil(avg_chunk.max(1)).max(1);
        SegmentationParams {
            avg_size: avg_segment,
            min_size: avg_segment / 2,
            max_size: avg_segment * 2,
            divisor,
        }
    }

    pub fn with_divisor(mut self, divisor: u64) -> Self {
        self.divisor = divisor.max(1);
        self
    }
}

impl Default for SegmentationParams {
    fn default() -> Self {
        SegmentationParams::new(1 << 20, 8192)
    }
}

/// A run of adjacent chunks sharing one key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    /// Indices into the chunk stream.
    pub chunks: Range<usize>,
    pub total_bytes: u64,
    /// Minimum member fingerprint.
    pub representative: Fingerprint,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }

    /// Builds a segment over `chunks[range]`, computing size and representative.
    pub fn over(chunks: &[ChunkRef], range: Range<usize>) -> Self {
        let members = &chunks[range.clone()];
        let representative = members
            .iter()
            .map(|c| c.fingerprint)
            .min()
            .expect("segment must contain a chunk");
        Segment {
            chunks: range,
            total_bytes: members.iter().map(|c| c.len).sum(),
            representative,
        }
    }
}

/// Groups a chunk stream into segments.
///
/// A boundary follows a chunk whose fingerprint is `divisor - 1` modulo the
/// divisor once the segment holds at least `min_size` bytes, and always
/// follows the chunk that pushes the segment past `max_size`.
pub fn segment(chunks: &[ChunkRef], params: &SegmentationParams) -> Vec<Segment> {
    let mut segments = Vec::new();
    let mut start = 0;
    let mut size = 0u64;
    for (i, c) in chunks.iter().enumerate() {
        size += c.len;
        let content_cut = size >= params.min_size && c.fingerprint.rem(params.divisor) == params.divisor - 1;
        if content_cut || size > params.max_size {
            segments.push(Segment::over(chunks, start..i + 1));
            start = i + 1;
            size = 0;
        }
    }
    if start < chunks.len() {
        segments.push(Segment::over(chunks, start..chunks.len()));
    }
    segments
}

/// One segment per chunk, for per-chunk keying.
pub fn singleton_segments(chunks: &[ChunkRef]) -> Vec<Segment> {
    (0..chunks.len()).map(|i| Segment::over(chunks, i..i + 1)).collect()
}
