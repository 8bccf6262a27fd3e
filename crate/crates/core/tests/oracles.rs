//! Checks of the core algorithms against independent, deliberately naive
//! reimplementations.

use num_bigint::BigUint;
use proptest::prelude::*;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reed_core::chunker::{self, ChunkRef, ChunkingParams, Fingerprint, SegmentationParams, RABIN_POLYNOMIAL};
use reed_core::crypto::{self, FileKey, MleKey, Scheme, Stub};
use reed_core::keygen::{self, ManagerKeyPair};
use reed_core::rekeying::{self, DerivationKeyPair};
use reed_core::Error;
use sha2::{Digest, Sha256};
use std::sync::OnceLock;

fn bytes(seed: u64, len: usize) -> Vec<u8> {
    let mut v = vec![0u8; len];
    ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut v);
    v
}

// GF(2)[x] arithmetic on u128, enough for degree <= 63 polynomials.

fn deg(p: u128) -> i32 {
    127 - p.leading_zeros() as i32
}

fn gf_mod(mut a: u128, p: u128) -> u128 {
    let dp = deg(p);
    while a != 0 && deg(a) >= dp {
        a ^= p << (deg(a) - dp);
    }
    a
}

fn gf_mulmod(a: u128, b: u128, p: u128) -> u128 {
    let mut acc = 0u128;
    let mut a = gf_mod(a, p);
    let mut b = b;
    while b != 0 {
        if b & 1 == 1 {
            acc ^= a;
        }
        b >>= 1;
        a = gf_mod(a << 1, p);
    }
    acc
}

fn gf_gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        let r = gf_mod(a, b);
        a = b;
        b = r;
    }
    a
}

/// Ben-Or: `p` is irreducible iff `gcd(x^(2^i) - x, p) = 1` for all
/// `i <= deg(p) / 2`.
fn irreducible(p: u128) -> bool {
    let mut x_pow = 2u128; // x
    for _ in 1..=deg(p) / 2 {
        x_pow = gf_mulmod(x_pow, x_pow, p);
        if gf_gcd(p, x_pow ^ 2) != 1 {
            return false;
        }
    }
    true
}

/// Rabin hash of a window straight from the definition: the bytes as a
/// polynomial, reduced mod `p`.
fn window_hash(window: &[u8], p: u64) -> u64 {
    let mut h = 0u128;
    for &b in window {
        h = gf_mod((h << 8) | b as u128, p as u128);
    }
    h as u64
}

fn oracle_cuts(data: &[u8], params: &ChunkingParams) -> Vec<usize> {
    let mask = params.boundary_mask();
    let w = params.window;
    let mut cuts = Vec::new();
    let mut start = 0;
    while start < data.len() {
        if data.len() - start <= params.min_size {
            cuts.push(data.len());
            break;
        }
        let end = (start + params.max_size).min(data.len());
        let cut = (start + params.min_size..end)
            .find(|&i| window_hash(&data[i - w..i], params.polynomial) & mask == 0)
            .unwrap_or(end);
        cuts.push(cut);
        start = cut;
    }
    cuts
}

#[test]
fn rabin_polynomial_is_irreducible() {
    assert_eq!(deg(RABIN_POLYNOMIAL as u128), 53);
    assert!(irreducible(RABIN_POLYNOMIAL as u128));
    // sanity of the test itself
    assert!(irreducible(0b111)); // x^2 + x + 1
    assert!(!irreducible(0b101)); // (x + 1)^2
}

#[test]
fn rabin_matches_window_oracle() {
    for (seed, params) in [
        (1, ChunkingParams::rabin(64, 256, 1024)),
        (2, ChunkingParams::rabin(128, 512, 2048)),
        (3, ChunkingParams::default()),
    ] {
        let data = bytes(seed, 100_000);
        let chunker = chunker::RabinChunker::new(&params).unwrap();
        assert_eq!(chunker.cut_points(&data), oracle_cuts(&data, &params), "seed {seed}");
    }
}

#[test]
fn rabin_resynchronizes_after_insertion() {
    let params = ChunkingParams::rabin(256, 1024, 4096);
    let data = bytes(5, 200_000);
    let mut shifted = bytes(6, 77);
    shifted.extend_from_slice(&data);

    let a: std::collections::HashSet<Vec<u8>> = chunker::chunk(&data, &params)
        .unwrap()
        .iter()
        .map(|c| c.data.to_vec())
        .collect();
    let b = chunker::chunk(&shifted, &params).unwrap();
    let shared = b.iter().filter(|c| a.contains(c.data)).count();
    assert!(shared * 10 >= b.len() * 9, "only {shared} of {} chunks survived", b.len());

    // fixed-size chunking loses every chunk under the same edit
    let fa: std::collections::HashSet<Vec<u8>> =
        chunker::fixed_chunk(&data, 1024).iter().map(|c| c.data.to_vec()).collect();
    assert!(chunker::fixed_chunk(&shifted, 1024).iter().all(|c| !fa.contains(c.data)));
}

fn refs_from(seed: u64, n: usize) -> Vec<ChunkRef> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| ChunkRef {
            fingerprint: Fingerprint(rng.gen()),
            len: rng.gen_range(1..=16_384),
        })
        .collect()
}

/// Boundary rule restated with arbitrary-precision arithmetic and without
/// the running-size shortcut.
fn oracle_segments(chunks: &[ChunkRef], p: &SegmentationParams) -> Vec<std::ops::Range<usize>> {
    let d = BigUint::from(p.divisor);
    let mut out = Vec::new();
    let mut start = 0;
    for i in 0..chunks.len() {
        let size: u64 = chunks[start..=i].iter().map(|c| c.len).sum();
        let r = BigUint::from_bytes_be(chunks[i].fingerprint.as_bytes()) % &d;
        if (size >= p.min_size && r == &d - 1u32) || size > p.max_size {
            out.push(start..i + 1);
            start = i + 1;
        }
    }
    if start < chunks.len() {
        out.push(start..chunks.len());
    }
    out
}

#[test]
fn segmentation_matches_oracle() {
    for (seed, params) in [
        (1, SegmentationParams::new(1 << 20, 8192)),
        (2, SegmentationParams::new(64 << 10, 8192)),
        (3, SegmentationParams::new(32 << 10, 8192).with_divisor(3)),
    ] {
        let chunks = refs_from(seed, 3000);
        let segs = chunker::segment(&chunks, &params);
        let expect = oracle_segments(&chunks, &params);
        assert_eq!(segs.iter().map(|s| s.chunks.clone()).collect::<Vec<_>>(), expect);
        for s in &segs {
            let members = &chunks[s.chunks.clone()];
            assert_eq!(s.representative, members.iter().map(|c| c.fingerprint).min().unwrap());
            assert_eq!(s.total_bytes, members.iter().map(|c| c.len).sum::<u64>());
            // only the chunk that crosses the cap can take a segment past it
            assert!(s.total_bytes - members.last().unwrap().len <= params.max_size);
        }
    }
}

#[test]
fn fingerprint_order_is_big_endian() {
    let mut a = [0u8; 32];
    let mut b = [0u8; 32];
    a[0] = 1;
    b[31] = 0xff;
    assert!(Fingerprint(b) < Fingerprint(a));
}

fn flip_all_bits(scheme: Scheme, chunk: &[u8], key: &MleKey) -> usize {
    let (t, s) = scheme.encrypt(chunk, key);
    let package = crypto::join_package(&t.bytes, &s);
    let mut detected = 0;
    for bit in 0..package.len() * 8 {
        let mut p = package.clone();
        p[bit / 8] ^= 1 << (bit % 8);
        let (t2, s2) = crypto::split_package(&p, crypto::STUB_SIZE).unwrap();
        match scheme.decrypt(&t2.bytes, &s2) {
            Err(Error::IntegrityViolation) => detected += 1,
            other => panic!("{scheme:?} bit {bit}: {other:?}"),
        }
    }
    detected
}

#[test]
fn every_bit_flip_is_detected() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for len in [1usize, 31, 32, 33, 64, 100] {
        let chunk = bytes(len as u64, len);
        let key = MleKey(rng.gen());
        for scheme in [Scheme::Basic, Scheme::Enhanced] {
            assert_eq!(flip_all_bits(scheme, &chunk, &key), (len + 64) * 8);
        }
    }
}

#[test]
fn same_bit_in_two_pieces_keeps_self_xor_but_is_detected() {
    let chunk = bytes(9, 96);
    let key = MleKey([3; 32]);
    let package = crypto::enhanced_package(&chunk, &key);
    for (a, b, bit) in [(0usize, 1usize, 0u8), (0, 2, 7), (1, 3, 4)] {
        let mut head = package.head.clone();
        head[a * 32 + 5] ^= 1 << bit;
        head[b * 32 + 5] ^= 1 << bit;
        assert_eq!(crypto::self_xor(&head), crypto::self_xor(&package.head));
        let mut bytes = head;
        bytes.extend_from_slice(&package.tail);
        let (t, s) = crypto::split_package(&bytes, 64).unwrap();
        assert!(matches!(crypto::enhanced_decrypt(&t.bytes, &s), Err(Error::IntegrityViolation)));
    }
}

#[test]
fn basic_scheme_matches_formula() {
    let chunk = bytes(10, 200);
    let key = MleKey([7; 32]);
    let package = crypto::basic_package(&chunk, &key);
    let mut expect = chunk.clone();
    expect.extend_from_slice(&[0u8; 32]);
    let g = crypto::mask(&key.0, expect.len());
    expect.iter_mut().zip(&g).for_each(|(a, b)| *a ^= b);
    assert_eq!(package.head, expect);
    let h: [u8; 32] = Sha256::digest(&expect).into();
    let t: Vec<u8> = h.iter().zip(&key.0).map(|(a, b)| a ^ b).collect();
    assert_eq!(package.tail.to_vec(), t);
}

#[test]
fn enhanced_scheme_matches_formula() {
    let chunk = bytes(11, 77);
    let key = MleKey([9; 32]);
    let mut y = crypto::mle_encrypt(&chunk, &key);
    y.extend_from_slice(&key.0);
    let h: [u8; 32] = Sha256::digest(&y).into();
    let g = crypto::mask(&h, y.len());
    let c2: Vec<u8> = y.iter().zip(&g).map(|(a, b)| a ^ b).collect();
    let mut t = crypto::self_xor(&c2);
    t.iter_mut().zip(&h).for_each(|(a, b)| *a ^= b);
    let package = crypto::enhanced_package(&chunk, &key);
    assert_eq!(package.head, c2);
    assert_eq!(package.tail, t);
}

fn manager() -> &'static ManagerKeyPair {
    static K: OnceLock<ManagerKeyPair> = OnceLock::new();
    K.get_or_init(|| ManagerKeyPair::generate(&mut ChaCha8Rng::seed_from_u64(1), 1024).unwrap())
}

#[test]
fn oprf_matches_direct_exponentiation() {
    let kp = manager();
    let pk = kp.public();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..20 {
        let fp = Fingerprint(rng.gen());
        let req = keygen::blind(&fp, pk, &mut rng).unwrap();
        let key = keygen::unblind(&kp.sign(&req.value).unwrap(), &req, pk).unwrap();
        let s = BigUint::from_bytes_be(fp.as_bytes()).modpow(kp.private_exponent(), &pk.n);
        let raw = s.to_bytes_be();
        let mut fixed = vec![0u8; 128 - raw.len()];
        fixed.extend_from_slice(&raw);
        assert_eq!(key.0, <[u8; 32]>::from(Sha256::digest(&fixed)));
    }
}

#[test]
fn key_regression_decryptability_matrix() {
    let owner = DerivationKeyPair::generate(&mut ChaCha8Rng::seed_from_u64(4), 1024).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let stubs = vec![Stub(vec![1; 64]), Stub(vec![2; 64])];

    let mut states = vec![rekeying::kr_init("o", &owner.public, &mut rng)];
    for _ in 0..3 {
        let next = rekeying::kr_wind(states.last().unwrap(), Some(&owner)).unwrap();
        states.push(next);
    }
    let files: Vec<_> = states
        .iter()
        .map(|s| crypto::encrypt_stub_file(&stubs, &rekeying::derive_file_key(s), &mut rng))
        .collect();

    for (held, state) in states.iter().enumerate() {
        for (era, file) in files.iter().enumerate() {
            let key: Option<FileKey> = rekeying::kr_unwind_to(state, &owner.public, era as u32)
                .ok()
                .map(|s| rekeying::derive_file_key(&s));
            let readable = key.is_some_and(|k| crypto::decrypt_stub_file(file, &k, 64).is_ok());
            assert_eq!(readable, era <= held, "holder of v{held} on file v{era}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn packages_round_trip(chunk in proptest::collection::vec(any::<u8>(), 1..3000), key in any::<[u8; 32]>()) {
        for scheme in [Scheme::Basic, Scheme::Enhanced] {
            let (t, s) = scheme.encrypt(&chunk, &MleKey(key));
            prop_assert_eq!(t.len(), chunk.len());
            prop_assert_eq!(t.fingerprint, Fingerprint::of(&t.bytes));
            prop_assert_eq!(scheme.decrypt(&t.bytes, &s).unwrap(), chunk.clone());
        }
    }

    #[test]
    fn chunks_reassemble(data in proptest::collection::vec(any::<u8>(), 0..20_000), fixed in 1usize..5000) {
        for params in [ChunkingParams::rabin(64, 256, 1024), ChunkingParams::fixed(fixed)] {
            let chunks = chunker::chunk(&data, &params).unwrap();
            let joined: Vec<u8> = chunks.iter().flat_map(|c| c.data.iter().copied()).collect();
            prop_assert_eq!(&joined, &data);
            let mut offset = 0;
            for c in &chunks {
                prop_assert_eq!(c.offset, offset);
                prop_assert!(!c.is_empty());
                offset += c.len();
            }
        }
    }

    #[test]
    fn rabin_chunk_sizes_bounded(seed in any::<u64>()) {
        let params = ChunkingParams::rabin(64, 256, 1024);
        let data = bytes(seed, 10_000);
        let chunks = chunker::chunk(&data, &params).unwrap();
        let (last, rest) = chunks.split_last().unwrap();
        for c in rest {
            prop_assert!(c.len() >= 64 && c.len() <= 1024);
        }
        prop_assert!(last.len() <= 1024);
    }

    #[test]
    fn segments_partition_stream(seed in any::<u64>(), n in 0usize..400, divisor in 1u64..40) {
        let chunks = refs_from(seed, n);
        let params = SegmentationParams::new(40_000, 8192).with_divisor(divisor);
        let segs = chunker::segment(&chunks, &params);
        let mut next = 0;
        for s in &segs {
            prop_assert_eq!(s.chunks.start, next);
            prop_assert!(!s.is_empty());
            next = s.chunks.end;
        }
        prop_assert_eq!(next, n);
    }

    #[test]
    fn unwind_inverts_wind(k in 1usize..5, seed in any::<u64>()) {
        static OWNER: OnceLock<DerivationKeyPair> = OnceLock::new();
        let owner = OWNER.get_or_init(|| DerivationKeyPair::generate(&mut ChaCha8Rng::seed_from_u64(6), 1024).unwrap());
        let s0 = rekeying::kr_init("o", &owner.public, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut s = s0.clone();
        for _ in 0..k {
            s = rekeying::kr_wind(&s, Some(owner)).unwrap();
        }
        prop_assert_eq!(s.version as usize, k);
        for _ in 0..k {
            s = rekeying::kr_unwind(&s, &owner.public).unwrap();
        }
        prop_assert_eq!(s, s0);
    }
}
