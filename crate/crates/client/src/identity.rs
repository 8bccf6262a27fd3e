//! A user's private keys: the access key that opens envelopes and the
//! derivation key pair used to wind key states of files the user owns.

use std::fs;
use std::path::Path;

use num_bigint::BigUint;
use rand::{CryptoRng, RngCore};
use reed_core::rekeying::{validate_user_id, AccessKeyPair, DerivationKeyPair, DerivationPublicKey, UserRecord};
use reed_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const DEFAULT_DERIVATION_BITS: usize = 2048;

#[derive(Clone, Debug)]
pub struct Identity {
    pub user: String,
    pub access: AccessKeyPair,
    pub derivation: DerivationKeyPair,
}

#[derive(Serialize, Deserialize)]
struct IdentityFile {
    user: String,
    access_secret: String,
    derivation_n: String,
    derivation_e: String,
    derivation_d: String,
}

fn parse_hex_int(s: &str) -> Result<BigUint> {
    BigUint::parse_bytes(s.as_bytes(), 16).ok_or_else(|| Error::InvalidConfig("bad hex in identity file".into()))
}

impl Identity {
    pub fn generate<R: RngCore + CryptoRng>(user: &str, rng: &mut R, derivation_bits: usize) -> Result<Self> {
        validate_user_id(user)?;
        Ok(Identity {
            user: user.to_owned(),
            access: AccessKeyPair::generate(rng),
            derivation: DerivationKeyPair::generate(rng, derivation_bits)?,
        })
    }

    /// Public half, as registered with the key store.
    pub fn record(&self) -> UserRecord {
        UserRecord {
            access: self.access.public,
            derivation: self.derivation.public.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = IdentityFile {
            user: self.user.clone(),
            access_secret: hex::encode(self.access.secret_bytes()),
            derivation_n: self.derivation.public.n.to_str_radix(16),
            derivation_e: self.derivation.public.e.to_str_radix(16),
            derivation_d: self.derivation.private_exponent().to_str_radix(16),
        };
        let json = serde_json::to_vec_pretty(&file).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, json)?;
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            fs::set_permissions(path, fs::Permissions::from_mode(0o600))?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = fs::read(path).map_err(|e| Error::InvalidConfig(format!("identity {}: {e}", path.display())))?;
        let file: IdentityFile =
            serde_json::from_slice(&raw).map_err(|e| Error::InvalidConfig(format!("identity {}: {e}", path.display())))?;
        validate_user_id(&file.user)?;
        let mut secret = [0u8; 32];
        hex::decode_to_slice(&file.access_secret, &mut secret)
            .map_err(|_| Error::InvalidConfig("bad access secret in identity file".into()))?;
        Ok(Identity {
            user: file.user,
            access: AccessKeyPair::from_secret_bytes(secret),
            derivation: DerivationKeyPair::from_parts(
                DerivationPublicKey {
                    n: parse_hex_int(&file.derivation_n)?,
                    e: parse_hex_int(&file.derivation_e)?,
                },
                parse_hex_int(&file.derivation_d)?,
            ),
        })
    }
}
