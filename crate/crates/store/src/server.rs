//! The dedup store behind the storage server.
//!
//! Data root: `recipes/`, `stubs/`, `containers/`, `index.log`.
//! Key root: `states/`, `users/`. The two roots must not overlap.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use reed_core::recipe::FileRecipe;
use reed_core::rekeying::validate_user_id;
use reed_core::service::{PutAck, StoreService, StoreStats};
use reed_core::{Error, FileId, Fingerprint, Result};
use serde::{Deserialize, Serialize};

use crate::blobs::{read_or_not_found, write_atomic, VersionedBlobs};
use crate::container::{read_locations, ContainerStore};
use crate::index::{FingerprintIndex, Location};

pub const DEFAULT_CONTAINER_SIZE: u64 = 4 * 1024 * 1024;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    pub data_root: PathBuf,
    pub key_root: PathBuf,
    #[serde(default = "default_container_size")]
    pub container_size: u64,
}

fn default_listen() -> String {
    "127.0.0.1:7400".into()
}

fn default_container_size() -> u64 {
    DEFAULT_CONTAINER_SIZE
}

impl StoreConfig {
    pub fn new(data_root: impl Into<PathBuf>, key_root: impl Into<PathBuf>) -> Self {
        StoreConfig {
            listen: default_listen(),
            data_root: data_root.into(),
            key_root: key_root.into(),
            container_size: DEFAULT_CONTAINER_SIZE,
        }
    }

    /// Both roots under `dir`, as `data/` and `keys/`.
    pub fn under(dir: &Path) -> Self {
        StoreConfig::new(dir.join("data"), dir.join("keys"))
    }
}

#[derive(Debug)]
struct Ingest {
    index: FingerprintIndex,
    containers: ContainerStore,
}

#[derive(Debug, Default)]
struct Accounting {
    recipe_sizes: HashMap<FileId, u64>,
    stub_sizes: HashMap<FileId, u64>,
}

#[derive(Debug)]
pub struct DedupStore {
    data_root: PathBuf,
    key_root: PathBuf,
    containers_dir: PathBuf,
    recipes_dir: PathBuf,
    users_dir: PathBuf,
    stubs: VersionedBlobs,
    states: VersionedBlobs,
    ingest: Mutex<Ingest>,
    /// Serializes blob compare-and-set and guards the byte counters.
    meta: Mutex<Accounting>,
}

fn canonical(p: &Path) -> Result<PathBuf> {
    fs::create_dir_all(p)?;
    Ok(fs::canonicalize(p)?)
}

impl DedupStore {
    pub fn open(config: &StoreConfig) -> Result<Self> {
        let data_root = canonical(&config.data_root)?;
        let key_root = canonical(&config.key_root)?;
        if data_root.starts_with(&key_root) || key_root.starts_with(&data_root) {
            return Err(Error::InvalidConfig("data and key roots must be disjoint".into()));
        }
        let containers_dir = data_root.join("containers");
        let index = FingerprintIndex::open(&data_root.join("index.log"))?;
        let containers = ContainerStore::open(&containers_dir, config.container_size, &index.extents())?;
        let recipes_dir = data_root.join("recipes");
        let users_dir = key_root.join("users");
        fs::create_dir_all(&recipes_dir)?;
        fs::create_dir_all(&users_dir)?;

        let store = DedupStore {
            stubs: VersionedBlobs::new(data_root.join("stubs"), "stub", "stub file"),
            states: VersionedBlobs::new(key_root.join("states"), "state", "key state"),
            data_root,
            key_root,
            containers_dir,
            recipes_dir,
            users_dir,
            ingest: Mutex::new(Ingest { index, containers }),
            meta: Mutex::new(Accounting::default()),
        };
        store.rebuild_accounting()?;
        let stats = store.stats()?;
        log::info!(
            "store open: {} index entries, {} containers",
            stats.index_entries,
            stats.containers
        );
        Ok(store)
    }

    fn rebuild_accounting(&self) -> Result<()> {
        let mut acc = Accounting::default();
        for entry in fs::read_dir(&self.recipes_dir)? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "recipe") {
                let recipe = FileRecipe::from_bytes(&fs::read(&path)?)?;
                acc.recipe_sizes.insert(recipe.id, recipe.size);
            }
        }
        acc.stub_sizes = self.stubs.scan_current()?.into_iter().collect();
        *self.meta() = acc;
        Ok(())
    }

    fn ingest(&self) -> std::sync::MutexGuard<'_, Ingest> {
        self.ingest.lock().expect("ingest lock poisoned")
    }

    fn meta(&self) -> std::sync::MutexGuard<'_, Accounting> {
        self.meta.lock().expect("meta lock poisoned")
    }

    pub fn data_root(&self) -> &Path {
        &self.data_root
    }

    pub fn key_root(&self) -> &Path {
        &self.key_root
    }

    pub fn containers_dir(&self) -> &Path {
        &self.containers_dir
    }

    fn recipe_path(&self, id: &FileId) -> PathBuf {
        self.recipes_dir.join(format!("{}.recipe", id.to_hex()))
    }

    fn user_path(&self, user: &str) -> Result<PathBuf> {
        validate_user_id(user)?;
        Ok(self.users_dir.join(format!("{user}.pub")))
    }

    fn locate(&self, fps: &[Fingerprint]) -> Result<Vec<Location>> {
        let ingest = self.ingest();
        fps.iter()
            .map(|fp| ingest.index.get(fp).ok_or_else(|| Error::NotFound(format!("package {}", fp.to_hex()))))
            .collect()
    }
}

impl StoreService for DedupStore {
    fn dedup_query(&self, fps: &[Fingerprint]) -> Result<Vec<bool>> {
        let ingest = self.ingest();
        Ok(fps.iter().map(|fp| ingest.index.contains(fp)).collect())
    }

    fn put_packages(&self, items: &[(Fingerprint, Vec<u8>)]) -> Result<PutAck> {
        if items.iter().any(|(fp, bytes)| Fingerprint::of(bytes) != *fp) {
            return Err(Error::FingerprintMismatch);
        }
        let mut guard = self.ingest();
        let Ingest { index, containers } = &mut *guard;
        let start = containers.position();
        let mut seen = HashSet::new();
        let mut fresh = Vec::new();
        let result = (|| {
            for (fp, bytes) in items {
                if index.contains(fp) || !seen.insert(*fp) {
                    continue;
                }
                fresh.push((*fp, containers.append(bytes)?));
            }
            // data before index, so a logged entry always has its bytes
            containers.sync()?;
            index.commit(&fresh)
        })();
        if let Err(e) = result {
            log::error!("package batch failed, rolling back: {e}");
            containers.rollback(start)?;
            return Err(e);
        }
        Ok(PutAck {
            new_packages: fresh.len() as u32,
            new_bytes: fresh.iter().map(|(_, l)| l.len as u64).sum(),
        })
    }

    fn get_packages(&self, fps: &[Fingerprint]) -> Result<Vec<Vec<u8>>> {
        let locs = self.locate(fps)?;
        read_locations(&self.containers_dir, &locs)
    }

    fn put_recipe(&self, id: &FileId, recipe: &[u8]) -> Result<()> {
        let parsed = FileRecipe::from_bytes(recipe)?;
        if parsed.id != *id {
            return Err(Error::malformed("recipe id does not match its key"));
        }
        let mut meta = self.meta();
        write_atomic(&self.recipe_path(id), recipe)?;
        meta.recipe_sizes.insert(*id, parsed.size);
        Ok(())
    }

    fn get_recipe(&self, id: &FileId) -> Result<Vec<u8>> {
        read_or_not_found(&self.recipe_path(id), || format!("recipe {}", id.to_hex()))
    }

    fn put_stub(&self, id: &FileId, expected: Option<u32>, version: u32, blob: &[u8]) -> Result<()> {
        let mut meta = self.meta();
        self.stubs.put(id, expected, version, blob)?;
        meta.stub_sizes.insert(*id, blob.len() as u64);
        Ok(())
    }

    fn get_stub(&self, id: &FileId, version: Option<u32>) -> Result<(u32, Vec<u8>)> {
        self.stubs.get(id, version)
    }

    fn put_state(&self, id: &FileId, expected: Option<u32>, blob: &[u8]) -> Result<()> {
        let version = u32::from_be_bytes(
            blob.get(..4)
                .ok_or_else(|| Error::malformed("wrapped state shorter than its version"))?
                .try_into()
                .expect("4 bytes"),
        );
        let _meta = self.meta();
        self.states.put(id, expected, version, blob).map(|_| ())
    }

    fn get_state(&self, id: &FileId) -> Result<Vec<u8>> {
        self.states.get(id, None).map(|(_, b)| b)
    }

    fn put_user(&self, user: &str, record: &[u8]) -> Result<()> {
        let path = self.user_path(user)?;
        let _meta = self.meta();
        match fs::read(&path) {
            Ok(existing) if existing == record => Ok(()),
            Ok(_) => Err(Error::AlreadyExists(format!("user {user}"))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => write_atomic(&path, record),
            Err(e) => Err(e.into()),
        }
    }

    fn get_user(&self, user: &str) -> Result<Vec<u8>> {
        let path = self.user_path(user)?;
        read_or_not_found(&path, || format!("user {user}"))
    }

    fn stats(&self) -> Result<StoreStats> {
        let (physical_bytes, index_entries, containers) = {
            let ingest = self.ingest();
            (ingest.index.bytes(), ingest.index.len() as u64, ingest.containers.count())
        };
        let meta = self.meta();
        Ok(StoreStats {
            logical_bytes: meta.recipe_sizes.values().sum(),
            physical_bytes,
            stub_bytes: meta.stub_sizes.values().sum(),
            containers,
            index_entries,
        })
    }
}
