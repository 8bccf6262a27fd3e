//! Transport-independent service interfaces. The storage server and key
//! manager implement them in process; the client implements them over TCP.

use std::sync::Arc;

use num_bigint::BigUint;

use crate::chunker::Fingerprint;
use crate::error::Result;
use crate::keygen::{KeyManager, ManagerPublicKey};
use crate::recipe::FileId;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StoreStats {
    /// Sum of file sizes over current recipes.
    pub logical_bytes: u64,
    /// Trimmed-package bytes in containers.
    pub physical_bytes: u64,
    /// Bytes of current stub files, envelope overhead included.
    pub stub_bytes: u64,
    pub containers: u64,
    pub index_entries: u64,
}

impl StoreStats {
    /// `1 - (physical + stub) / logical`, or 0 for an empty store.
    pub fn saving(&self) -> f64 {
        if self.logical_bytes == 0 {
            return 0.0;
        }
        1.0 - (self.physical_bytes + self.stub_bytes) as f64 / self.logical_bytes as f64
    }
}

/// Outcome of a package batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PutAck {
    pub new_packages: u32,
    pub new_bytes: u64,
}

pub trait StoreService: Send + Sync {
    fn dedup_query(&self, fps: &[Fingerprint]) -> Result<Vec<bool>>;
    fn put_packages(&self, items: &[(Fingerprint, Vec<u8>)]) -> Result<PutAck>;
    /// Returns packages in request order.
    fn get_packages(&self, fps: &[Fingerprint]) -> Result<Vec<Vec<u8>>>;

    fn put_recipe(&self, id: &FileId, recipe: &[u8]) -> Result<()>;
    fn get_recipe(&self, id: &FileId) -> Result<Vec<u8>>;

    /// Stores stub file `version` and advances the current pointer, provided
    /// the pointer still equals `expected` (`None`: no stub file yet).
    fn put_stub(&self, id: &FileId, expected: Option<u32>, version: u32, blob: &[u8]) -> Result<()>;
    /// Fetches a given version, or the current one; returns its version.
    fn get_stub(&self, id: &FileId, version: Option<u32>) -> Result<(u32, Vec<u8>)>;

    /// Stores a wrapped state whose version is read from its first four
    /// bytes, under the same compare-and-set rule as stub files.
    fn put_state(&self, id: &FileId, expected: Option<u32>, blob: &[u8]) -> Result<()>;
    fn get_state(&self, id: &FileId) -> Result<Vec<u8>>;

    fn put_user(&self, user: &str, record: &[u8]) -> Result<()>;
    fn get_user(&self, user: &str) -> Result<Vec<u8>>;

    fn stats(&self) -> Result<StoreStats>;
}

pub trait KeyService: Send + Sync {
    fn public_key(&self) -> Result<ManagerPublicKey>;
    fn sign(&self, blinded: &[BigUint]) -> Result<Vec<BigUint>>;
    /// Largest batch the service accepts.
    fn batch_cap(&self) -> usize;
}

/// A key manager used in process under a fixed client identity.
#[derive(Debug, Clone)]
pub struct LocalKeyService {
    manager: Arc<KeyManager>,
    client: String,
}

impl LocalKeyService {
    pub fn new(manager: Arc<KeyManager>, client: impl Into<String>) -> Self {
        LocalKeyService {
            manager,
            client: client.into(),
        }
    }

    pub fn manager(&self) -> &Arc<KeyManager> {
        &self.manager
    }
}

impl KeyService for LocalKeyService {
    fn public_key(&self) -> Result<ManagerPublicKey> {
        Ok(self.manager.public_key().clone())
    }

    fn sign(&self, blinded: &[BigUint]) -> Result<Vec<BigUint>> {
        self.manager.sign_batch(&self.client, blinded)
    }

    fn batch_cap(&self) -> usize {
        self.manager.batch_cap()
    }
}

impl<T: StoreService + ?Sized> StoreService for Arc<T> {
    fn dedup_query(&self, fps: &[Fingerprint]) -> Result<Vec<bool>> {
        (**self).dedup_query(fps)
    }
    fn put_packages(&self, items: &[(Fingerprint, Vec<u8>)]) -> Result<PutAck> {
        (**self).put_packages(items)
    }
    fn get_packages(&self, fps: &[Fingerprint]) -> Result<Vec<Vec<u8>>> {
        (**self).get_packages(fps)
    }
    fn put_recipe(&self, id: &FileId, recipe: &[u8]) -> Result<()> {
        (**self).put_recipe(id, recipe)
    }
    fn get_recipe(&self, id: &FileId) -> Result<Vec<u8>> {
        (**self).get_recipe(id)
    }
    fn put_stub(&self, id: &FileId, expected: Option<u32>, version: u32, blob: &[u8]) -> Result<()> {
        (**self).put_stub(id, expected, version, blob)
    }
    fn get_stub(&self, id: &FileId, version: Option<u32>) -> Result<(u32, Vec<u8>)> {
        (**self).get_stub(id, version)
    }
    fn put_state(&self, id: &FileId, expected: Option<u32>, blob: &[u8]) -> Result<()> {
        (**self).put_state(id, expected, blob)
    }
    fn get_state(&self, id: &FileId) -> Result<Vec<u8>> {
        (**self).get_state(id)
    }
    fn put_user(&self, user: &str, record: &[u8]) -> Result<()> {
        (**self).put_user(user, record)
    }
    fn get_user(&self, user: &str) -> Result<Vec<u8>> {
        (**self).get_user(user)
    }
    fn stats(&self) -> Result<StoreStats> {
        (**self).stats()
    }
}

impl<T: KeyService + ?Sized> KeyService for Arc<T> {
    fn public_key(&self) -> Result<ManagerPublicKey> {
        (**self).public_key()
    }
    fn sign(&self, blinded: &[BigUint]) -> Result<Vec<BigUint>> {
        (**self).sign(blinded)
    }
    fn batch_cap(&self) -> usize {
        (**self).batch_cap()
    }
}
