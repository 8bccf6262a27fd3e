//! Key manager configuration and key persistence.

use std::fs;
use std::path::{Path, PathBuf};

use num_bigint::BigUint;
use rand::rngs::OsRng;
use reed_core::keygen::{self, KeyManager, ManagerKeyPair, RateLimit};
use reed_core::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::blobs::write_atomic;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManagerConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    pub key_file: PathBuf,
    #[serde(default = "default_bits")]
    pub modulus_bits: usize,
    #[serde(default = "default_capacity")]
    pub rate_capacity: u64,
    #[serde(default = "default_refill")]
    pub rate_refill_per_sec: f64,
    #[serde(default = "default_batch_cap")]
    pub batch_cap: usize,
}

fn default_listen() -> String {
    "127.0.0.1:7401".into()
}
fn default_bits() -> usize {
    keygen::DEFAULT_MODULUS_BITS
}
fn default_capacity() -> u64 {
    keygen::DEFAULT_RATE_CAPACITY
}
fn default_refill() -> f64 {
    keygen::DEFAULT_RATE_REFILL
}
fn default_batch_cap() -> usize {
    keygen::DEFAULT_BATCH_CAP
}

impl ManagerConfig {
    pub fn new(key_file: impl Into<PathBuf>) -> Self {
        ManagerConfig {
            listen: default_listen(),
            key_file: key_file.into(),
            modulus_bits: default_bits(),
            rate_capacity: default_capacity(),
            rate_refill_per_sec: default_refill(),
            batch_cap: default_batch_cap(),
        }
    }

    pub fn rate_limit(&self) -> RateLimit {
        RateLimit {
            capacity: self.rate_capacity,
            refill_per_sec: self.rate_refill_per_sec,
        }
    }

    /// Loads the key file, creating a fresh key on first start.
    pub fn build(&self) -> Result<KeyManager> {
        let keys = if self.key_file.exists() {
            load_keypair(&self.key_file)?
        } else {
            log::info!("generating {}-bit manager key at {}", self.modulus_bits, self.key_file.display());
            let kp = ManagerKeyPair::generate(&mut OsRng, self.modulus_bits)?;
            save_keypair(&self.key_file, &kp)?;
            kp
        };
        Ok(KeyManager::new(keys, self.rate_limit(), self.batch_cap))
    }
}

#[derive(Serialize, Deserialize)]
struct KeyFile {
    n: String,
    e: String,
    d: String,
    p: String,
    q: String,
}

fn hex_of(x: &BigUint) -> String {
    x.to_str_radix(16)
}

fn parse_hex(s: &str) -> Result<BigUint> {
    BigUint::parse_bytes(s.as_bytes(), 16).ok_or_else(|| Error::InvalidConfig("bad hex in manager key file".into()))
}

pub fn save_keypair(path: &Path, kp: &ManagerKeyPair) -> Result<()> {
    let (p, q) = kp.primes();
    let file = KeyFile {
        n: hex_of(&kp.public().n),
        e: hex_of(&kp.public().e),
        d: hex_of(kp.private_exponent()),
        p: hex_of(p),
        q: hex_of(q),
    };
    let json = serde_json::to_vec_pretty(&file).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    write_atomic(path, &json)?;
    #[cfg(unix)]
    {
        use std::os::unix::fs::PermissionsExt;
        fs::set_permissions(path, fs::Permissions::from_mode(0o600))?;
    }
    Ok(())
}

pub fn load_keypair(path: &Path) -> Result<ManagerKeyPair> {
    let file: KeyFile = serde_json::from_slice(&fs::read(path)?)
        .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
    ManagerKeyPair::from_components(
        parse_hex(&file.n)?,
        parse_hex(&file.e)?,
        parse_hex(&file.d)?,
        parse_hex(&file.p)?,
        parse_hex(&file.q)?,
    )
}
