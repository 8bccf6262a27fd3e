//! End-to-end acceptance checks. Runs every criterion in order, prints one
//! PASS/FAIL line each and exits non-zero if any failed.

use std::collections::HashSet;
use std::io::{BufRead, BufReader};
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use num_bigint::BigUint;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reed_client::{Client, Identity, KeyingMode, RekeyMode, UploadOptions};
use reed_core::chunker::{ChunkingParams, SegmentationParams};
use reed_core::crypto::{self, EncryptedStubFile, STUB_FILE_OVERHEAD, STUB_SIZE};
use reed_core::keygen::{self, KeyManager, ManagerKeyPair, RateLimit};
use reed_core::rekeying::{self, DerivationKeyPair, KeyState};
use reed_core::service::{KeyService, LocalKeyService, StoreService};
use reed_core::wire::{Loopback, TcpTransport, WireKeys, WireStore, PUT_PACKAGES};
use reed_core::{Error, Fingerprint, MleKey, Policy, Scheme};
use reed_store::{net, DedupStore, StoreConfig};
use reed_trace::oracle;
use reed_trace::{generate_trace, replay, GenParams, Mode, Record, ReplayParams, Snapshot, Trace};
use sha2::{Digest, Sha256};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        match $cond {
            true => {}
            false => return Err(format!($($fmt)+)),
        }
    };
}

fn random_bytes(rng: &mut ChaCha8Rng, len: usize) -> Vec<u8> {
    let mut v = vec![0u8; len];
    rng.fill_bytes(&mut v);
    v
}

fn random_key(rng: &mut ChaCha8Rng) -> MleKey {
    let mut k = [0u8; 32];
    rng.fill_bytes(&mut k);
    MleKey(k)
}

fn manager(seed: u64) -> Arc<KeyManager> {
    let kp = ManagerKeyPair::generate(&mut ChaCha8Rng::seed_from_u64(seed), 1024).unwrap();
    Arc::new(KeyManager::new(kp, RateLimit::unlimited(), keygen::DEFAULT_BATCH_CAP))
}

fn identity(user: &str, seed: u64) -> Identity {
    Identity::generate(user, &mut ChaCha8Rng::seed_from_u64(seed), 1024).unwrap()
}

fn hash_dir(dir: &Path) -> Vec<u8> {
    let mut names: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    names.sort();
    let mut h = Sha256::new();
    for p in names {
        h.update(p.file_name().unwrap().to_string_lossy().as_bytes());
        h.update(std::fs::read(p).unwrap());
    }
    h.finalize().to_vec()
}

// 1
fn round_trip() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut n = 0;
    for _ in 0..1000 {
        let len = rng.gen_range(1..=16_384);
        let chunk = random_bytes(&mut rng, len);
        let key = random_key(&mut rng);
        for scheme in [Scheme::Basic, Scheme::Enhanced] {
            let (trimmed, stub) = scheme.encrypt(&chunk, &key);
            let back = scheme.decrypt(&trimmed.bytes, &stub).map_err(|e| format!("{scheme:?} len {len}: {e}"))?;
            ensure!(back == chunk, "{scheme:?} len {len}: plaintext differs");
            n += 1;
        }
    }
    let took = start.elapsed();
    ensure!(took < Duration::from_secs(30), "took {took:?}");
    Ok(format!("{n} encrypt/decrypt pairs in {:.2}s", took.as_secs_f64()))
}

// 2
fn stub_overhead() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let chunk = random_bytes(&mut rng, 8192);
    let mut lens = Vec::new();
    for scheme in [Scheme::Basic, Scheme::Enhanced] {
        let (trimmed, stub) = scheme.encrypt(&chunk, &random_key(&mut rng));
        ensure!(trimmed.len() + stub.0.len() == 8192 + 64, "{scheme:?} package size");
        lens.push(stub.0.len());
    }
    ensure!(lens == [64, 64], "stub lengths {lens:?}");
    let ratio = 64.0 / 8192.0;
    ensure!(ratio == 0.0078125, "ratio {ratio}");
    let pct = format!("{:.2}%", ratio * 100.0);
    ensure!(pct == "0.78%", "rounded {pct}");
    Ok(format!("64/8192 = {}% ({pct})", ratio * 100.0))
}

fn expect_violation(scheme: Scheme, package: &[u8], split: usize, what: &str) -> Result<(), String> {
    let (trimmed, stub) = package.split_at(split);
    match scheme.decrypt(trimmed, &reed_core::Stub(stub.to_vec())) {
        Err(Error::IntegrityViolation) => Ok(()),
        other => Err(format!("{scheme:?} {what}: {other:?}")),
    }
}

// 3
fn integrity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut flips, mut pairs) = (0u64, 0u64);
    for _ in 0..20 {
        let len = rng.gen_range(1..=128);
        let chunk = random_bytes(&mut rng, len);
        let key = random_key(&mut rng);
        for scheme in [Scheme::Basic, Scheme::Enhanced] {
            let (trimmed, stub) = scheme.encrypt(&chunk, &key);
            let split = trimmed.len();
            let package = [trimmed.bytes.clone(), stub.0.clone()].concat();
            for bit in 0..package.len() * 8 {
                let mut p = package.clone();
                p[bit / 8] ^= 1 << (bit % 8);
                expect_violation(scheme, &p, split, &format!("len {len} bit {bit}"))?;
                flips += 1;
            }
            if scheme == Scheme::Enhanced {
                // the same bit in two 32-byte pieces of the masked body
                // leaves its self-XOR unchanged
                let body = package.len() - 32;
                let pieces = body.div_ceil(32);
                for a in 0..pieces {
                    for b in a + 1..pieces {
                        for bit in 0..256 {
                            let (x, y) = (a * 32 + bit / 8, b * 32 + bit / 8);
                            if y >= body {
                                continue;
                            }
                            let mut p = package.clone();
                            p[x] ^= 1 << (bit % 8);
                            p[y] ^= 1 << (bit % 8);
                            let mut probe = [0u8; 32];
                            for piece in p[..body].chunks(32) {
                                probe.iter_mut().zip(piece).for_each(|(o, v)| *o ^= v);
                            }
                            ensure!(probe == crypto::self_xor(&package[..body]), "pattern changed the self-XOR");
                            expect_violation(scheme, &p, split, &format!("len {len} pieces {a},{b} bit {bit}"))?;
                            pairs += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(format!("{flips} single-bit flips and {pairs} even-piece flips all rejected"))
}

// 4
fn oprf_oracle() -> Outcome {
    let mgr = manager(4);
    let kp = mgr.keypair().clone();
    let pk = kp.public().clone();
    let width = pk.modulus_len();
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let fps: Vec<Fingerprint> = (0..100).map(|_| Fingerprint::of(&random_bytes(&mut rng, 64))).collect();
    let protocol = |rng: &mut ChaCha8Rng| -> Result<Vec<MleKey>, String> {
        let reqs: Vec<_> = fps.iter().map(|fp| keygen::blind(fp, &pk, rng).unwrap()).collect();
        let blinded: Vec<BigUint> = reqs.iter().map(|r| r.value.clone()).collect();
        let signed = mgr.sign_batch("acceptance", &blinded).map_err(|e| e.to_string())?;
        signed
            .iter()
            .zip(&reqs)
            .map(|(s, r)| keygen::unblind(s, r, &pk).map_err(|e| e.to_string()))
            .collect()
    };
    let first = protocol(&mut rng)?;
    let second = protocol(&mut rng)?;
    for (i, fp) in fps.iter().enumerate() {
        let x = BigUint::from_bytes_be(fp.as_bytes());
        let sig = x.modpow(kp.private_exponent(), &pk.n).to_bytes_be();
        let mut fixed = vec![0u8; width - sig.len()];
        fixed.extend_from_slice(&sig);
        let direct: [u8; 32] = Sha256::digest(&fixed).into();
        ensure!(first[i].0 == direct, "fingerprint {i}: protocol output differs from direct exponentiation");
        ensure!(first[i] == second[i], "fingerprint {i}: blindings disagree");
    }
    Ok("100/100 keys equal SHA-256(fp^d mod N); re-blinded keys equal".into())
}

// 5
fn key_regression() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let owner = DerivationKeyPair::generate(&mut rng, 1024).unwrap();
    let pk = owner.public.clone();
    let mut chain: Vec<KeyState> = vec![rekeying::kr_init("owner", &pk, &mut rng)];
    for _ in 0..5 {
        chain.push(rekeying::kr_wind(chain.last().unwrap(), Some(&owner)).unwrap());
    }
    for k in 0..=5 {
        let mut s = chain[k].clone();
        for _ in 0..k {
            s = rekeying::kr_unwind(&s, &pk).unwrap();
        }
        ensure!(s == chain[0], "unwind^{k} did not return to the initial state");
    }

    let stubs: Vec<reed_core::Stub> = (0..8).map(|i| reed_core::Stub(vec![i; STUB_SIZE])).collect();
    let files: Vec<EncryptedStubFile> = chain
        .iter()
        .map(|s| crypto::encrypt_stub_file(&stubs, &rekeying::derive_file_key(s), &mut rng))
        .collect();
    let mut cells = 0;
    for (v, held) in chain.iter().enumerate() {
        for (w, file) in files.iter().enumerate() {
            let readable = rekeying::kr_unwind_to(held, &pk, w as u32)
                .and_then(|s| crypto::decrypt_stub_file(file, &rekeying::derive_file_key(&s), STUB_SIZE));
            match (w <= v, readable) {
                (true, Ok(got)) => ensure!(got == stubs, "v{v} read w{w} wrongly"),
                (false, Err(Error::AccessDenied)) => {}
                (want, got) => return Err(format!("state v{v}, stub file v{w}: expected readable={want}, got {got:?}")),
            }
            // no key reachable from v opens a newer file either
            if w > v {
                for u in 0..=v {
                    let k = rekeying::derive_file_key(&rekeying::kr_unwind_to(held, &pk, u as u32).unwrap());
                    ensure!(crypto::decrypt_stub_file(file, &k, STUB_SIZE).is_err(), "v{v} key u{u} opened w{w}");
                }
            }
            cells += 1;
        }
    }

    // end to end: a revoked reader keeps nothing newer than what they held
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(DedupStore::open(&StoreConfig::under(dir.path())).unwrap());
    let mgr = manager(50);
    let alice = client(&store, &mgr, identity("alice", 51));
    let bob = client(&store, &mgr, identity("bob", 52));
    alice.register().unwrap();
    bob.register().unwrap();
    let data = random_bytes(&mut rng, 200_000);
    let f = alice.upload_bytes("doc", &data, &Policy::parse("bob").unwrap()).unwrap();
    ensure!(bob.download_bytes(&f.file_id).unwrap() == data, "bob could not read");
    alice.rekey(&f.file_id, &Policy::parse("alice").unwrap(), RekeyMode::Active).unwrap();
    ensure!(
        matches!(bob.download_bytes(&f.file_id), Err(Error::AccessDenied)),
        "revoked reader not denied"
    );
    ensure!(alice.download_bytes(&f.file_id).unwrap() == data, "owner lost access");
    Ok(format!("unwind^k(wind^k(S)) == S for k <= 5; {cells}-cell matrix as expected; revoked reader denied"))
}

fn client<S: StoreService + Clone>(store: &S, mgr: &Arc<KeyManager>, id: Identity) -> Client<S, LocalKeyService> {
    let user = id.user.clone();
    Client::new(store.clone(), LocalKeyService::new(mgr.clone(), user), id, UploadOptions::default()).unwrap()
}

// 6
fn rekey_preserves_dedup() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(DedupStore::open(&StoreConfig::under(dir.path())).unwrap());
    let wire = WireStore::new(Loopback::new(store.clone()));
    let mgr = manager(6);
    let id = identity("alice", 60);
    let access = id.access.clone();
    let alice = Client::new(wire, LocalKeyService::new(mgr, "alice"), id, UploadOptions::default()).unwrap();
    alice.register().unwrap();
    let data = random_bytes(&mut ChaCha8Rng::seed_from_u64(61), 64 << 20);
    let f = alice.upload_bytes("big", &data, &Policy::parse("alice").unwrap()).unwrap();

    let before = hash_dir(store.containers_dir());
    let phys = store.stats().unwrap().physical_bytes;
    let (v0, stub0) = store.get_stub(&f.file_id, None).unwrap();
    let wrapped = reed_core::WrappedKeyState::from_bytes(&store.get_state(&f.file_id).unwrap()).unwrap();
    let old_key = rekeying::derive_file_key(&rekeying::unwrap_state(&wrapped, "alice", &access).unwrap());
    let frames_before = alice.store().transport().captured().len();

    let v = alice.rekey(&f.file_id, &Policy::parse("alice").unwrap(), RekeyMode::Active).unwrap();
    let frames: Vec<(u8, Vec<u8>)> = alice.store().transport().captured().split_off(frames_before);
    let after = hash_dir(store.containers_dir());
    let (v1, stub1) = store.get_stub(&f.file_id, None).unwrap();

    ensure!(before == after, "container bytes changed");
    ensure!(store.stats().unwrap().physical_bytes == phys, "physical size changed");
    ensure!(!frames.iter().any(|(t, _)| *t == PUT_PACKAGES), "rekey sent packages");
    ensure!((v0, v1, v) == (0, 1, 1), "versions {v0} -> {v1}");
    ensure!(stub0 != stub1 && stub0.len() == stub1.len(), "stub file unchanged");
    ensure!(
        stub1.len() == STUB_SIZE * f.chunks + STUB_FILE_OVERHEAD,
        "stub file is {} bytes for {} chunks",
        stub1.len(),
        f.chunks
    );
    ensure!(
        matches!(
            crypto::decrypt_stub_file(&EncryptedStubFile(stub1.clone()), &old_key, STUB_SIZE),
            Err(Error::AuthenticationFailure)
        ),
        "old file key still opens the stub file"
    );
    ensure!(alice.download_bytes(&f.file_id).unwrap() == data, "download after rekey differs");
    Ok(format!(
        "{} chunks: container hash unchanged, stub file ({} bytes) replaced, old key rejected",
        f.chunks,
        stub1.len()
    ))
}

// 7
fn similarity_request_count() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(DedupStore::open(&StoreConfig::under(dir.path())).unwrap());
    let mgr = manager(7);
    let data = random_bytes(&mut ChaCha8Rng::seed_from_u64(70), 64 << 20);
    let mut counts = Vec::new();
    for (user, keying) in [
        ("sim", KeyingMode::Similarity(SegmentationParams::new(1 << 20, 8192))),
        ("chunk", KeyingMode::PerChunk),
    ] {
        let opts = UploadOptions {
            chunking: ChunkingParams::default(),
            keying,
            ..Default::default()
        };
        let keys = LocalKeyService::new(mgr.clone(), user);
        let before = mgr.stats().signatures;
        let c = Client::new(store.clone(), keys, identity(user, 71), opts).unwrap();
        c.register().unwrap();
        let r = c.upload_bytes("f", &data, &Policy::parse(user).unwrap()).unwrap();
        let signed = mgr.stats().signatures - before;
        ensure!(signed == r.key_requests, "{user}: manager signed {signed}, client counted {}", r.key_requests);
        counts.push((r.chunks as u64, r.segments as u64, r.key_requests));
    }
    let (chunks, segments, sim_requests) = counts[0];
    let (chunks2, _, chunk_requests) = counts[1];
    ensure!(chunks == chunks2, "chunking differed between runs");
    ensure!(sim_requests == segments, "similarity mode: {sim_requests} requests for {segments} segments");
    ensure!(chunk_requests == chunks, "per-chunk mode: {chunk_requests} requests for {chunks} chunks");
    let ratio = chunk_requests as f64 / sim_requests as f64;
    ensure!(chunk_requests >= 100 * sim_requests, "reduction only {ratio:.1}x");
    Ok(format!(
        "{chunks} chunks, {segments} segments: {sim_requests} vs {chunk_requests} requests ({ratio:.1}x)"
    ))
}

/// Finds record fingerprints so that A is the minimum of all chunks and
/// D the minimum of the second segment.
fn ada_trace() -> (Trace, Vec<(char, u32)>) {
    let labels = ['A', 'B', 'C', 'D', 'E', 'F', 'G', 'H'];
    let size = |i: usize| 1000 + i as u32;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    loop {
        let fps: Vec<Vec<u8>> = (0..8).map(|_| random_bytes(&mut rng, 6)).collect();
        let sha: Vec<Fingerprint> = fps
            .iter()
            .enumerate()
            .map(|(i, fp)| Fingerprint::of(&reed_trace::synthesize_chunk(fp, size(i) as usize)))
            .collect();
        let a_min = (1..8).all(|i| sha[0] < sha[i]);
        let d_min = [5, 6, 7].iter().all(|&i| sha[3] < sha[i]);
        if !(a_min && d_min) {
            continue;
        }
        let rec = |i: usize| Record {
            fingerprint: fps[i].clone(),
            size: size(i),
        };
        // Seg1 = A B C E, Seg2 = D F G H, Seg3 = A B C D
        let order = [0, 1, 2, 4, 3, 5, 6, 7, 0, 1, 2, 3];
        let trace = Trace {
            snapshots: vec![Snapshot {
                name: "0".into(),
                records: order.iter().map(|&i| rec(i)).collect(),
            }],
        };
        return (trace, labels.iter().enumerate().map(|(i, &l)| (l, size(i))).collect());
    }
}

// 8
fn segment_keying_law() -> Outcome {
    let (trace, sizes) = ada_trace();
    // boundaries after every fourth chunk, never on content
    let seg = SegmentationParams {
        avg_size: 4000,
        min_size: u64::MAX,
        max_size: 3999,
        divisor: 1 << 40,
    };
    let run = |mode| {
        replay(
            &trace,
            &ReplayParams {
                mode,
                segmentation: seg,
                ..Default::default()
            },
        )
        .unwrap()
        .total()
    };
    let sim = run(Mode::Similarity);
    let exact = run(Mode::Chunk);
    let size_of = |l: char| sizes.iter().find(|(x, _)| *x == l).unwrap().1 as u64;
    let all: u64 = sizes.iter().map(|(_, s)| *s as u64).sum();
    ensure!(sim.index_entries == 9, "similarity stored {} packages, want 9", sim.index_entries);
    ensure!(
        sim.physical_bytes == all + size_of('D'),
        "similarity physical {} != every chunk once plus D again ({})",
        sim.physical_bytes,
        all + size_of('D')
    );
    ensure!(exact.index_entries == 8 && exact.physical_bytes == all, "chunk mode not exact");

    // oracle equivalence over many small traces
    let mut traces = 0;
    let mut gen = ChaCha8Rng::seed_from_u64(80);
    for i in 0..30 {
        let snapshots = gen.gen_range(1..=6);
        let chunks = gen.gen_range(1..=1000 / snapshots);
        let t = generate_trace(&GenParams {
            seed: i,
            snapshots,
            chunks,
            mutate: gen.gen_range(0.0..=1.0),
            avg_chunk: [256, 1024, 4096][i as usize % 3],
            runs: gen.gen_range(1..=8),
        })
        .unwrap();
        ensure!(t.chunk_count() <= 1000, "trace too large");
        let seg = SegmentationParams::new(gen.gen_range(2..=16) * 1024, 1024);
        for mode in [Mode::Chunk, Mode::Similarity] {
            let report = replay(
                &t,
                &ReplayParams {
                    mode,
                    segmentation: seg,
                    manager_bits: 512,
                    ..Default::default()
                },
            )
            .unwrap();
            let want = oracle::expected(&t, mode, &seg);
            for (row, e) in report.rows.iter().zip(&want) {
                ensure!(
                    row.stats.physical_bytes == e.physical
                        && row.stats.index_entries == e.stored_packages
                        && row.stats.stub_bytes == e.stub
                        && row.stats.logical_bytes == e.logical,
                    "trace {i} {mode} snapshot {}: replay {:?} vs oracle {e:?}",
                    row.snapshot,
                    row.stats
                );
            }
        }
        traces += 1;
    }
    Ok(format!(
        "A/D/A: 9 packages stored (D twice), chunk mode 8; {traces} random traces match the oracle in both modes"
    ))
}

// 9
fn duplicate_snapshot() -> Outcome {
    let t = generate_trace(&GenParams {
        seed: 9,
        snapshots: 1,
        chunks: 1024,
        ..Default::default()
    })
    .unwrap();
    let n = t.snapshots[0].records.len() as u64;
    let twice = Trace {
        snapshots: vec![t.snapshots[0].clone(), t.snapshots[0].clone()],
    };
    let r = replay(&twice, &ReplayParams::default()).unwrap();
    let (a, b) = (r.rows[0].stats, r.rows[1].stats);
    ensure!(b.physical_bytes == a.physical_bytes, "physical grew by {}", b.physical_bytes - a.physical_bytes);
    let want = 64 * n + STUB_FILE_OVERHEAD as u64;
    ensure!(b.stub_bytes - a.stub_bytes == want, "stub grew by {}, want {want}", b.stub_bytes - a.stub_bytes);
    ensure!(b.saving() > a.saving(), "saving did not increase");
    Ok(format!("+0 physical bytes, +{want} stub bytes (64 x {n} + {STUB_FILE_OVERHEAD})"))
}

// 10
fn mode_comparison() -> Outcome {
    let t = generate_trace(&GenParams {
        seed: 10,
        snapshots: 10,
        chunks: 4096,
        mutate: 0.1,
        avg_chunk: 8192,
        runs: 1,
    })
    .unwrap();
    let run = |mode| replay(&t, &ReplayParams { mode, ..Default::default() }).unwrap().total();
    let sim = run(Mode::Similarity);
    let exact = run(Mode::Chunk);
    let detail = format!(
        "logical {}, physical similarity {} / chunk {}, stub {} / {}, saving {:.2}% / {:.2}%",
        sim.logical_bytes,
        sim.physical_bytes,
        exact.physical_bytes,
        sim.stub_bytes,
        exact.stub_bytes,
        100.0 * sim.saving(),
        100.0 * exact.saving()
    );
    ensure!(sim.physical_bytes >= exact.physical_bytes, "ordering violated: {detail}");
    ensure!(sim.stub_bytes == exact.stub_bytes, "stub totals differ: {detail}");
    ensure!(exact.saving() > 0.8, "chunk-mode saving not above 80%: {detail}");
    ensure!(sim.saving() > 0.8, "similarity-mode saving not above 80%: {detail}");
    Ok(detail)
}

// 11
fn basic_weakness() -> Outcome {
    let mgr = manager(11);
    let keys = LocalKeyService::new(mgr, "acceptance");
    let pk = keys.public_key().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(110);
    let m1 = random_bytes(&mut rng, 4096);
    let m2 = random_bytes(&mut rng, 4096);
    // both chunks in one segment: the key comes from the smaller fingerprint
    let rep = Fingerprint::of(&m1).min(Fingerprint::of(&m2));
    let req = keygen::blind(&rep, &pk, &mut rand::rngs::OsRng).unwrap();
    let signed = keys.sign(std::slice::from_ref(&req.value)).unwrap();
    let key = keygen::unblind(&signed[0], &req, &pk).unwrap();

    let xor = |a: &[u8], b: &[u8]| a.iter().zip(b).map(|(x, y)| x ^ y).collect::<Vec<u8>>();
    let with_canary = |m: &[u8]| [m, &crypto::CANARY[..]].concat();
    let (b1, _) = Scheme::Basic.encrypt(&m1, &key);
    let (b2, _) = Scheme::Basic.encrypt(&m2, &key);
    let l = b1.len();
    ensure!(
        xor(&b1.bytes, &b2.bytes) == xor(&with_canary(&m1)[..l], &with_canary(&m2)[..l]),
        "basic scheme did not leak the plaintext XOR"
    );
    let (e1, _) = Scheme::Enhanced.encrypt(&m1, &key);
    let (e2, _) = Scheme::Enhanced.encrypt(&m2, &key);
    ensure!(
        xor(&e1.bytes, &e2.bytes) != xor(&with_canary(&m1)[..l], &with_canary(&m2)[..l]),
        "enhanced scheme leaked the plaintext XOR"
    );
    ensure!(
        UploadOptions {
            scheme: Scheme::Basic,
            ..Default::default()
        }
        .validate()
        .is_err(),
        "client accepts the basic scheme under segment keys"
    );
    Ok("basic: T1 ^ T2 == (M1||0) ^ (M2||0) prefix; enhanced: relation fails".into())
}

struct Server {
    child: Child,
    addr: String,
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn start_server(root: &Path) -> Server {
    let mut child = Command::new(env!("CARGO_BIN_EXE_reed-server"))
        .args(["store", "--listen", "127.0.0.1:0", "--data-root"])
        .arg(root.join("data"))
        .arg("--key-root")
        .arg(root.join("keys"))
        .stderr(Stdio::piped())
        .spawn()
        .expect("spawn reed-server");
    let mut lines = BufReader::new(child.stderr.take().unwrap()).lines();
    let addr = loop {
        let line = lines.next().expect("server exited").unwrap();
        if let Some(a) = line.strip_prefix("store listening on ") {
            break a.trim().to_owned();
        }
    };
    // keep draining so the child never blocks on a full pipe
    std::thread::spawn(move || for _ in lines {});
    Server { child, addr }
}

// 12
fn durability() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mgr = manager(12);
    let (maddr, _) = net::spawn_keys("127.0.0.1:0", mgr).unwrap();
    let id = identity("alice", 120);
    let data = random_bytes(&mut ChaCha8Rng::seed_from_u64(121), 6 << 20);
    let connect = |addr: &str| {
        let store = WireStore::new(TcpTransport::connect(addr).unwrap());
        let keys = WireKeys::connect(TcpTransport::connect(maddr.to_string()).unwrap(), 256).unwrap();
        Client::new(store, keys, id.clone(), UploadOptions::default()).unwrap()
    };

    let mut server = start_server(dir.path());
    let c = connect(&server.addr);
    c.register().unwrap();
    let f = c.upload_bytes("backup.img", &data, &Policy::parse("alice").unwrap()).unwrap();
    let before = c.store().stats().unwrap();
    // hard kill: no shutdown path runs
    server.child.kill().unwrap();
    server.child.wait().unwrap();
    drop(c);

    let server = start_server(dir.path());
    let c = connect(&server.addr);
    let after = c.store().stats().unwrap();
    ensure!(after == before, "stats changed across restart: {before:?} -> {after:?}");
    ensure!(c.download_bytes(&f.file_id).unwrap() == data, "download differs after restart");
    let again = c.upload_bytes("backup.img", &data, &Policy::parse("alice").unwrap()).unwrap();
    let resent = c.store().stats().unwrap();
    ensure!(again.new_bytes == 0, "re-upload stored {} new bytes", again.new_bytes);
    ensure!(resent.physical_bytes == before.physical_bytes, "physical grew on re-upload");
    ensure!(resent.index_entries == before.index_entries, "index grew on re-upload");
    ensure!(c.download_bytes(&f.file_id).unwrap() == data, "download differs after re-upload");
    Ok(format!(
        "{} bytes survive a kill; re-upload added 0 of {} physical bytes",
        data.len(),
        before.physical_bytes
    ))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 12] = [
        ("round trip", round_trip),
        ("stub overhead", stub_overhead),
        ("integrity completeness", integrity),
        ("OPRF oracle", oprf_oracle),
        ("key regression", key_regression),
        ("rekeying preserves dedup", rekey_preserves_dedup),
        ("similarity request count", similarity_request_count),
        ("segment keying law", segment_keying_law),
        ("exact-duplicate snapshot", duplicate_snapshot),
        ("mode comparison", mode_comparison),
        ("basic-scheme weakness", basic_weakness),
        ("durability and idempotence", durability),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    let mut seen = HashSet::new();
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.iter().any(|x| x == &n.to_string() || name.contains(x.as_str())) {
            continue;
        }
        seen.insert(n);
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n:2} PASS  {name}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:2} FAIL  {name}: {detail} [{secs:.1}s]");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", seen.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
