//! Upload, download and rekey against a store and a key manager.
//!
//! Upload runs as a pipeline: a key-generation thread obtains one MLE key
//! per segment in batches, a pool of workers encrypts whole segments, and
//! the calling thread restores segment order and ships packages in bounded
//! batches. Packages leave in file order whatever the worker count, so the
//! server ends up in the same state either way.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::thread;

use crossbeam_channel::{bounded, Receiver, Sender};
use rand::rngs::OsRng;
use reed_core::chunker::{self, ChunkRef, Segment};
use reed_core::crypto::{self, EncryptedStubFile, MleKey, Stub, TrimmedPackage, STUB_SIZE};
use reed_core::keygen::{self, BlindedRequest};
use reed_core::recipe::{FileRecipe, RecipeEntry};
use reed_core::rekeying::{self, KeyState, Policy, UserRecord, WrappedKeyState};
use reed_core::service::{KeyService, StoreService};
use reed_core::{Error, FileId, Fingerprint, Result};

use crate::config::{KeyingMode, UploadOptions};
use crate::identity::Identity;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RekeyMode {
    /// Renew the key state only; stubs are re-encrypted on the next update.
    Lazy,
    /// Also re-encrypt the stub file now.
    Active,
}

impl std::str::FromStr for RekeyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lazy" => Ok(RekeyMode::Lazy),
            "active" => Ok(RekeyMode::Active),
            other => Err(Error::InvalidConfig(format!("unknown rekey mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UploadReport {
    pub file_id: FileId,
    pub size: u64,
    pub chunks: usize,
    pub segments: usize,
    /// Fingerprints sent to the key manager.
    pub key_requests: u64,
    pub package_bytes: u64,
    /// Package bytes the server did not already hold.
    pub new_bytes: u64,
    pub stub_file_bytes: u64,
    pub key_version: u32,
}

/// Running totals over the life of a client.
#[derive(Debug, Default)]
pub struct ClientCounters {
    pub key_requests: AtomicU64,
    pub key_batches: AtomicU64,
    pub package_batches: AtomicU64,
    pub package_bytes: AtomicU64,
}

impl ClientCounters {
    pub fn key_requests(&self) -> u64 {
        self.key_requests.load(Ordering::Relaxed)
    }

    pub fn key_batches(&self) -> u64 {
        self.key_batches.load(Ordering::Relaxed)
    }

    pub fn package_batches(&self) -> u64 {
        self.package_batches.load(Ordering::Relaxed)
    }
}

type Encrypted = Vec<(TrimmedPackage, Stub)>;

/// What the transfer stage sent, in file order.
struct Sent {
    chunks: Vec<(Fingerprint, Stub)>,
    package_bytes: u64,
    new_bytes: u64,
}

pub struct Client<S, K> {
    store: S,
    keys: K,
    identity: Identity,
    options: UploadOptions,
    counters: ClientCounters,
}

impl<S, K> std::fmt::Debug for Client<S, K> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Client")
            .field("user", &self.identity.user)
            .field("options", &self.options)
            .finish_non_exhaustive()
    }
}

impl<S: StoreService, K: KeyService> Client<S, K> {
    pub fn new(store: S, keys: K, identity: Identity, options: UploadOptions) -> Result<Self> {
        options.validate()?;
        Ok(Client {
            store,
            keys,
            identity,
            options,
            counters: ClientCounters::default(),
        })
    }

    pub fn store(&self) -> &S {
        &self.store
    }

    pub fn keys(&self) -> &K {
        &self.keys
    }

    pub fn identity(&self) -> &Identity {
        &self.identity
    }

    pub fn options(&self) -> &UploadOptions {
        &self.options
    }

    pub fn set_options(&mut self, options: UploadOptions) -> Result<()> {
        options.validate()?;
        self.options = options;
        Ok(())
    }

    pub fn counters(&self) -> &ClientCounters {
        &self.counters
    }

    /// Publishes this identity's public keys.
    pub fn register(&self) -> Result<()> {
        self.store.put_user(&self.identity.user, &self.identity.record().to_bytes())
    }

    fn user_record(&self, user: &str) -> Result<UserRecord> {
        match self.store.get_user(user) {
            Ok(bytes) => UserRecord::from_bytes(&bytes),
            Err(Error::NotFound(_)) => Err(Error::UnknownUser(user.to_owned())),
            Err(e) => Err(e),
        }
    }

    /// The owner always stays on the policy, or they could not rekey later.
    fn with_owner(&self, policy: &Policy) -> Result<Policy> {
        Policy::new(policy.users().chain([self.identity.user.as_str()]).map(str::to_owned))
    }

    fn wrap(&self, state: &KeyState, policy: &Policy) -> Result<WrappedKeyState> {
        let mut directory = HashMap::new();
        for user in policy.users() {
            directory.insert(user.to_owned(), self.user_record(user)?.access);
        }
        rekeying::wrap_state(state, policy, |u| directory.get(u).copied(), &mut OsRng)
    }

    fn fetch_state(&self, id: &FileId) -> Result<(WrappedKeyState, KeyState)> {
        let wrapped = WrappedKeyState::from_bytes(&self.store.get_state(id)?)?;
        let state = rekeying::unwrap_state(&wrapped, &self.identity.user, &self.identity.access)?;
        Ok((wrapped, state))
    }

    /// Chunks and uploads a file.
    pub fn upload_file(&self, path: &Path, name: &str, policy: &Policy) -> Result<UploadReport> {
        let data = fs::read(path)?;
        self.upload_bytes(name, &data, policy)
    }

    pub fn upload_bytes(&self, name: &str, data: &[u8], policy: &Policy) -> Result<UploadReport> {
        let chunks = chunker::chunk(data, &self.options.chunking)?;
        let slices: Vec<&[u8]> = chunks.iter().map(|c| c.data).collect();
        self.upload_chunks(name, &slices, policy)
    }

    /// Uploads content that is already chunked.
    pub fn upload_chunks(&self, name: &str, chunks: &[&[u8]], policy: &Policy) -> Result<UploadReport> {
        if chunks.iter().any(|c| c.is_empty()) {
            return Err(Error::InvalidConfig("empty chunk".into()));
        }
        let policy = self.with_owner(policy)?;
        let id = FileId::new(&self.identity.user, name);
        let refs: Vec<ChunkRef> = chunks
            .iter()
            .map(|c| ChunkRef {
                fingerprint: Fingerprint::of(c),
                len: c.len() as u64,
            })
            .collect();
        let segments = match self.options.keying {
            KeyingMode::Similarity(p) => chunker::segment(&refs, &p),
            KeyingMode::PerChunk => chunker::singleton_segments(&refs),
        };

        // An existing file keeps its key state; a lazy rekey is settled here
        // because the stub file is written under the current state.
        let existing = match self.fetch_state(&id) {
            Ok((_, state)) => Some(state),
            Err(Error::NotFound(_)) => None,
            Err(e) => return Err(e),
        };
        let stub_version = match existing {
            Some(_) => match self.store.get_stub(&id, None) {
                Ok((v, _)) => Some(v),
                Err(Error::NotFound(_)) => None,
                Err(e) => return Err(e),
            },
            None => None,
        };
        let state = match &existing {
            Some(s) => s.clone(),
            None => rekeying::kr_init(&self.identity.user, &self.identity.derivation.public, &mut OsRng),
        };

        let requests_before = self.counters.key_requests();
        let Sent {
            chunks: stubs,
            package_bytes,
            new_bytes,
        } = self.encrypt_and_send(chunks, &segments)?;

        let mut seg_of = vec![0u32; chunks.len()];
        for (i, s) in segments.iter().enumerate() {
            seg_of[s.chunks.clone()].iter_mut().for_each(|x| *x = i as u32);
        }
        let recipe = FileRecipe {
            id,
            path: name.to_owned(),
            size: refs.iter().map(|r| r.len).sum(),
            scheme: self.options.scheme,
            key_version: state.version,
            segment_count: segments.len() as u32,
            entries: refs
                .iter()
                .zip(&stubs)
                .zip(&seg_of)
                .map(|((r, (fp, _)), &segment)| RecipeEntry {
                    fingerprint: *fp,
                    len: r.len as u32,
                    segment,
                })
                .collect(),
        };
        self.store.put_recipe(&id, &recipe.to_bytes())?;

        let stub_list: Vec<Stub> = stubs.into_iter().map(|(_, s)| s).collect();
        let file_key = rekeying::derive_file_key(&state);
        let stub_file = crypto::encrypt_stub_file(&stub_list, &file_key, &mut OsRng);
        self.store.put_stub(&id, stub_version, state.version, stub_file.as_bytes())?;
        if existing.is_none() {
            let wrapped = self.wrap(&state, &policy)?;
            self.store.put_state(&id, None, &wrapped.to_bytes())?;
        }

        Ok(UploadReport {
            file_id: id,
            size: recipe.size,
            chunks: chunks.len(),
            segments: segments.len(),
            key_requests: self.counters.key_requests() - requests_before,
            package_bytes,
            new_bytes,
            stub_file_bytes: stub_file.len() as u64,
            key_version: state.version,
        })
    }

    /// Runs the key, encryption and transfer stages.
    fn encrypt_and_send(
        &self,
        chunks: &[&[u8]],
        segments: &[Segment],
    ) -> Result<Sent> {
        let workers = self.options.workers;
        let (job_tx, job_rx) = bounded::<(usize, MleKey)>(4 * workers);
        let (res_tx, res_rx) = bounded::<Result<(usize, Encrypted)>>(4 * workers);

        thread::scope(|scope| {
            let keygen_res = res_tx.clone();
            scope.spawn(move || {
                if let Err(e) = self.key_stage(segments, &job_tx) {
                    let _ = keygen_res.send(Err(e));
                }
            });
            for _ in 0..workers {
                let (jobs, results) = (job_rx.clone(), res_tx.clone());
                scope.spawn(move || encrypt_stage(self.options.scheme, chunks, segments, jobs, results));
            }
            drop((job_rx, res_tx));
            let out = self.transfer_stage(segments, &res_rx);
            drop(res_rx);
            out
        })
    }

    /// Requests one key per distinct representative, in batches, and hands
    /// each segment to the workers once its key is known.
    fn key_stage(&self, segments: &[Segment], jobs: &Sender<(usize, MleKey)>) -> Result<()> {
        let pk = self.keys.public_key()?;
        let mut distinct: Vec<Fingerprint> = Vec::new();
        let mut slot: HashMap<Fingerprint, usize> = HashMap::new();
        let seg_slot: Vec<usize> = segments
            .iter()
            .map(|s| {
                *slot.entry(s.representative).or_insert_with(|| {
                    distinct.push(s.representative);
                    distinct.len() - 1
                })
            })
            .collect();

        let cap = self.keys.batch_cap().max(1);
        let mut keys: Vec<MleKey> = Vec::with_capacity(distinct.len());
        let mut next_segment = 0;
        for batch in distinct.chunks(cap) {
            let requests: Vec<BlindedRequest> = batch
                .iter()
                .map(|fp| keygen::blind(fp, &pk, &mut OsRng))
                .collect::<Result<_>>()?;
            let blinded: Vec<_> = requests.iter().map(|r| r.value.clone()).collect();
            let signed = self.keys.sign(&blinded)?;
            self.counters.key_batches.fetch_add(1, Ordering::Relaxed);
            self.counters
                .key_requests
                .fetch_add(batch.len() as u64, Ordering::Relaxed);
            if signed.len() != requests.len() {
                return Err(Error::Protocol("key manager answered a different number of values".into()));
            }
            for (s, req) in signed.iter().zip(&requests) {
                keys.push(keygen::unblind(s, req, &pk)?);
            }
            while next_segment < segments.len() && seg_slot[next_segment] < keys.len() {
                if jobs.send((next_segment, keys[seg_slot[next_segment]])).is_err() {
                    return Ok(()); // transfer stage gave up
                }
                next_segment += 1;
            }
        }
        Ok(())
    }

    fn transfer_stage(
        &self,
        segments: &[Segment],
        results: &Receiver<Result<(usize, Encrypted)>>,
    ) -> Result<Sent> {
        let mut pending: BTreeMap<usize, Encrypted> = BTreeMap::new();
        let mut stubs = Vec::new();
        let mut batch: Vec<(Fingerprint, Vec<u8>)> = Vec::new();
        let mut batch_bytes = 0usize;
        let (mut total, mut new) = (0u64, 0u64);
        let mut next = 0;

        let mut flush = |batch: &mut Vec<(Fingerprint, Vec<u8>)>, batch_bytes: &mut usize| -> Result<()> {
            if batch.is_empty() {
                return Ok(());
            }
            let ack = self.store.put_packages(batch)?;
            self.counters.package_batches.fetch_add(1, Ordering::Relaxed);
            self.counters
                .package_bytes
                .fetch_add(*batch_bytes as u64, Ordering::Relaxed);
            new += ack.new_bytes;
            batch.clear();
            *batch_bytes = 0;
            Ok(())
        };

        while next < segments.len() {
            let (seg, encrypted) = results
                .recv()
                .map_err(|_| Error::Protocol("upload pipeline stopped early".into()))??;
            pending.insert(seg, encrypted);
            while let Some(encrypted) = pending.remove(&next) {
                for (trimmed, stub) in encrypted {
                    // 36 bytes of framing per item
                    let cost = trimmed.len() + 36;
                    if batch_bytes + cost > self.options.batch_bytes {
                        flush(&mut batch, &mut batch_bytes)?;
                    }
                    total += trimmed.len() as u64;
                    batch_bytes += cost;
                    stubs.push((trimmed.fingerprint, stub));
                    batch.push((trimmed.fingerprint, trimmed.bytes));
                }
                next += 1;
            }
        }
        flush(&mut batch, &mut batch_bytes)?;
        Ok(Sent {
            chunks: stubs,
            package_bytes: total,
            new_bytes: new,
        })
    }

    /// Fetches and decrypts a file.
    pub fn download_bytes(&self, id: &FileId) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.download_into(id, &mut out)?;
        Ok(out)
    }

    /// Downloads to `dest` through a temporary file, so `dest` only appears
    /// once every chunk has been verified.
    pub fn download_file(&self, id: &FileId, dest: &Path) -> Result<u64> {
        let dir = dest.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let tmp = dir.join(format!(
            ".{}.part",
            dest.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
        ));
        let result = (|| {
            let mut f = std::io::BufWriter::new(fs::File::create(&tmp)?);
            let n = self.download_into(id, &mut f)?;
            f.into_inner().map_err(|e| e.into_error())?.sync_all()?;
            fs::rename(&tmp, dest)?;
            Ok(n)
        })();
        if result.is_err() {
            let _ = fs::remove_file(&tmp);
        }
        result
    }

    /// File key for the stub file at `stub_version`, starting from a state
    /// at least that new.
    fn file_key_for(&self, state: &KeyState, stub_version: u32) -> Result<crypto::FileKey> {
        if stub_version > state.version {
            return Err(Error::AccessDenied);
        }
        let owner = if state.owner == self.identity.user {
            self.identity.derivation.public.clone()
        } else {
            self.user_record(&state.owner)?.derivation
        };
        let old = rekeying::kr_unwind_to(state, &owner, stub_version)?;
        Ok(rekeying::derive_file_key(&old))
    }

    pub fn download_into<W: Write>(&self, id: &FileId, out: &mut W) -> Result<u64> {
        let recipe = FileRecipe::from_bytes(&self.store.get_recipe(id)?)?;
        let (_, state) = self.fetch_state(id)?;
        let (stub_version, blob) = self.store.get_stub(id, None)?;
        let key = self.file_key_for(&state, stub_version)?;
        let stubs = crypto::decrypt_stub_file(&EncryptedStubFile(blob), &key, STUB_SIZE)?;
        if stubs.len() != recipe.chunk_count() {
            return Err(Error::IntegrityViolation);
        }

        let mut written = 0u64;
        let mut start = 0;
        while start < recipe.entries.len() {
            let mut end = start;
            let mut bytes = 0usize;
            while end < recipe.entries.len()
                && (end == start || bytes + recipe.entries[end].len as usize <= self.options.batch_bytes)
            {
                bytes += recipe.entries[end].len as usize;
                end += 1;
            }
            let fps: Vec<Fingerprint> = recipe.entries[start..end].iter().map(|e| e.fingerprint).collect();
            let packages = self.store.get_packages(&fps)?;
            if packages.len() != fps.len() {
                return Err(Error::Protocol("store returned the wrong number of packages".into()));
            }
            for (i, trimmed) in packages.iter().enumerate() {
                let entry = &recipe.entries[start + i];
                let chunk = recipe.scheme.decrypt(trimmed, &stubs[start + i])?;
                if chunk.len() != entry.len as usize {
                    return Err(Error::IntegrityViolation);
                }
                out.write_all(&chunk)?;
                written += chunk.len() as u64;
            }
            start = end;
        }
        Ok(written)
    }

    /// Winds the file's key state and rewraps it under `policy`; in active
    /// mode also re-encrypts the stub file. Returns the new version.
    pub fn rekey(&self, id: &FileId, policy: &Policy, mode: RekeyMode) -> Result<u32> {
        let (_, old) = self.fetch_state(id)?;
        if old.owner != self.identity.user {
            return Err(Error::NotOwner);
        }
        let new = rekeying::kr_wind(&old, Some(&self.identity.derivation))?;
        let policy = self.with_owner(policy)?;
        let wrapped = self.wrap(&new, &policy)?;
        // state first: if we stop before the stub is replaced, the file is
        // simply in the lazy state
        self.store.put_state(id, Some(old.version), &wrapped.to_bytes())?;
        if mode == RekeyMode::Active {
            let (stub_version, blob) = self.store.get_stub(id, None)?;
            let old_key = self.file_key_for(&old, stub_version)?;
            let stubs = crypto::decrypt_stub_file(&EncryptedStubFile(blob), &old_key, STUB_SIZE)?;
            let fresh = crypto::encrypt_stub_file(&stubs, &rekeying::derive_file_key(&new), &mut OsRng);
            self.store.put_stub(id, Some(stub_version), new.version, fresh.as_bytes())?;
        }
        Ok(new.version)
    }

    /// Users on the file's current policy.
    pub fn policy_of(&self, id: &FileId) -> Result<Policy> {
        WrappedKeyState::from_bytes(&self.store.get_state(id)?)?.policy()
    }
}

fn encrypt_stage(
    scheme: reed_core::Scheme,
    chunks: &[&[u8]],
    segments: &[Segment],
    jobs: Receiver<(usize, MleKey)>,
    results: Sender<Result<(usize, Encrypted)>>,
) {
    for (seg, key) in jobs {
        let encrypted: Encrypted = chunks[segments[seg].chunks.clone()]
            .iter()
            .map(|c| scheme.encrypt(c, &key))
            .collect();
        if results.send(Ok((seg, encrypted))).is_err() {
            return;
        }
    }
}
