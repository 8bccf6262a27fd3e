//! Key regression over per-file key states and policy envelopes.
//!
//! A key state is wound forward with the owner's private RSA derivation key
//! (`value^d`) and unwound with the public one (`value^e`), so holders of the
//! current state can reach every earlier state but never a later one. The
//! file key is a hash of the state.
//!
//! States are shared through envelopes: a random content key seals the state
//! and is encapsulated once per authorized user with X25519, so any listed
//! user can open it and nobody else can.

use std::collections::BTreeSet;
use std::fmt;

use aes_gcm::aead::{Aead, KeyInit, Payload};
use aes_gcm::{Aes256Gcm, Nonce};
use hkdf::Hkdf;
use num_bigint::{BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::One;
use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha256};
use x25519_dalek::{PublicKey, StaticSecret};

use crate::codec::{Reader, Writer};
use crate::crypto::{FileKey, NONCE_SIZE, TAG_SIZE};
use crate::error::{Error, Result};
use crate::keygen::{convert, generate_rsa, to_fixed_be};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DerivationPublicKey {
    pub n: BigUint,
    pub e: BigUint,
}

impl DerivationPublicKey {
    pub fn modulus_len(&self) -> usize {
        (self.n.bits() as usize).div_ceil(8)
    }
}

/// Owner's derivation key pair; winding needs the private half.
#[derive(Clone)]
pub struct DerivationKeyPair {
    pub public: DerivationPublicKey,
    d: BigUint,
}

impl fmt::Debug for DerivationKeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DerivationKeyPair")
            .field("public", &self.public)
            .finish_non_exhaustive()
    }
}

impl DerivationKeyPair {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R, bits: usize) -> Result<Self> {
        use rsa::traits::{PrivateKeyParts, PublicKeyParts};
        let key = generate_rsa(rng, bits)?;
        Ok(DerivationKeyPair {
            public: DerivationPublicKey {
                n: convert(key.n()),
                e: convert(key.e()),
            },
            d: convert(key.d()),
        })
    }

    pub fn from_parts(public: DerivationPublicKey, d: BigUint) -> Self {
        DerivationKeyPair { public, d }
    }

    pub fn private_exponent(&self) -> &BigUint {
        &self.d
    }
}

/// One version of a file's key state.
#[derive(Clone, PartialEq, Eq)]
pub struct KeyState {
    pub version: u32,
    pub value: BigUint,
    pub owner: String,
    /// Byte width of the owner's modulus, used for fixed-width encodings.
    pub width: usize,
}

impl fmt::Debug for KeyState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("KeyState")
            .field("version", &self.version)
            .field("owner", &self.owner)
            .finish_non_exhaustive()
    }
}

impl KeyState {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u32(self.version);
        w.u16(self.width as u16);
        w.bytes(&to_fixed_be(&self.value, self.width));
        w.str16(&self.owner);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let version = r.u32()?;
        let width = r.u16()? as usize;
        let value = BigUint::from_bytes_be(r.take(width)?);
        let owner = r.str16()?;
        r.finish()?;
        Ok(KeyState {
            version,
            value,
            owner,
            width,
        })
    }
}

/// Picks a random version-0 state in `Z_N*`.
pub fn kr_init<R: RngCore + CryptoRng>(owner: &str, key: &DerivationPublicKey, rng: &mut R) -> KeyState {
    let one = BigUint::one();
    let value = loop {
        let v = rng.gen_biguint_range(&one, &key.n);
        if v.gcd(&key.n).is_one() {
            break v;
        }
    };
    KeyState {
        version: 0,
        value,
        owner: owner.to_owned(),
        width: key.modulus_len(),
    }
}

/// Derives the next state. Only the holder of the private key can do this.
pub fn kr_wind(state: &KeyState, owner: Option<&DerivationKeyPair>) -> Result<KeyState> {
    let keys = owner.ok_or(Error::NotOwner)?;
    if keys.public.modulus_len() != state.width || state.value >= keys.public.n {
        return Err(Error::NotOwner);
    }
    Ok(KeyState {
        version: state.version.checked_add(1).ok_or(Error::InvalidOperand)?,
        value: state.value.modpow(&keys.d, &keys.public.n),
        owner: state.owner.clone(),
        width: state.width,
    })
}

/// Derives the previous state from public information only.
pub fn kr_unwind(state: &KeyState, owner: &DerivationPublicKey) -> Result<KeyState> {
    if state.version == 0 {
        return Err(Error::AtInitialState);
    }
    Ok(KeyState {
        version: state.version - 1,
        value: state.value.modpow(&owner.e, &owner.n),
        owner: state.owner.clone(),
        width: state.width,
    })
}

/// Unwinds until `version` is reached.
pub fn kr_unwind_to(state: &KeyState, owner: &DerivationPublicKey, version: u32) -> Result<KeyState> {
    if version > state.version {
        return Err(Error::AccessDenied);
    }
    let mut s = state.clone();
    while s.version > version {
        s = kr_unwind(&s, owner)?;
    }
    Ok(s)
}

/// `SHA-256(fixed-width value || version)`.
pub fn derive_file_key(state: &KeyState) -> FileKey {
    let mut h = Sha256::new();
    h.update(to_fixed_be(&state.value, state.width));
    h.update(state.version.to_be_bytes());
    FileKey(h.finalize().into())
}

/// X25519 key pair used to open envelopes.
#[derive(Clone)]
pub struct AccessKeyPair {
    secret: StaticSecret,
    pub public: PublicKey,
}

impl fmt::Debug for AccessKeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AccessKeyPair")
            .field("public", &hex::encode(self.public.as_bytes()))
            .finish_non_exhaustive()
    }
}

impl AccessKeyPair {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R) -> Self {
        let mut bytes = [0u8; 32];
        rng.fill_bytes(&mut bytes);
        Self::from_secret_bytes(bytes)
    }

    pub fn from_secret_bytes(bytes: [u8; 32]) -> Self {
        let secret = StaticSecret::from(bytes);
        let public = PublicKey::from(&secret);
        AccessKeyPair { secret, public }
    }

    pub fn secret_bytes(&self) -> [u8; 32] {
        self.secret.to_bytes()
    }
}

/// Set of user identifiers, any one of which may open an envelope.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Policy {
    users: BTreeSet<String>,
}

impl Policy {
    pub fn new<I, S>(users: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let users: BTreeSet<String> = users.into_iter().map(Into::into).collect();
        if users.is_empty() {
            return Err(Error::PolicyEmpty);
        }
        for u in &users {
            validate_user_id(u)?;
        }
        Ok(Policy { users })
    }

    /// Parses `u1,u2,...`.
    pub fn parse(list: &str) -> Result<Self> {
        Policy::new(list.split(',').map(str::trim).filter(|s| !s.is_empty()))
    }

    pub fn users(&self) -> impl Iterator<Item = &str> {
        self.users.iter().map(String::as_str)
    }

    pub fn contains(&self, user: &str) -> bool {
        self.users.contains(user)
    }

    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }
}

/// User ids double as file names in the key store.
pub fn validate_user_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id.len() <= 64
        && !id.starts_with('.')
        && id.bytes().all(|b| b.is_ascii_alphanumeric() || b"-_.@".contains(&b));
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("invalid user id {id:?}")))
    }
}

/// Per-user encapsulation: ephemeral X25519 public key followed by the
/// sealed content key.
pub const ENCAPSULATION_SIZE: usize = 32 + 32 + TAG_SIZE;

/// A key state sealed for the members of a policy.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WrappedKeyState {
    pub version: u32,
    pub entries: Vec<(String, Vec<u8>)>,
    pub nonce: [u8; NONCE_SIZE],
    /// State ciphertext followed by the tag.
    pub sealed: Vec<u8>,
}

fn kek(shared: &[u8; 32], eph: &PublicKey, recipient: &PublicKey, user: &str) -> [u8; 32] {
    let hk = Hkdf::<Sha256>::new(Some(b"reed key-state envelope v1"), shared);
    let mut info = Vec::with_capacity(64 + user.len());
    info.extend_from_slice(eph.as_bytes());
    info.extend_from_slice(recipient.as_bytes());
    info.extend_from_slice(user.as_bytes());
    let mut out = [0u8; 32];
    hk.expand(&info, &mut out).expect("32 bytes is a valid HKDF length");
    out
}

impl WrappedKeyState {
    /// Bytes authenticated along with the state: everything before the nonce.
    fn header(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u32(self.version);
        w.u32(self.entries.len() as u32);
        for (user, encap) in &self.entries {
            w.str16(user);
            w.bytes32(encap);
        }
        w.finish()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.header();
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&self.sealed);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let version = r.u32()?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let user = r.str16()?;
            let encap = r.bytes32()?.to_vec();
            entries.push((user, encap));
        }
        let nonce = r.array::<NONCE_SIZE>()?;
        let sealed = r.rest().to_vec();
        if sealed.len() < TAG_SIZE {
            return Err(Error::malformed("wrapped state shorter than its tag"));
        }
        Ok(WrappedKeyState {
            version,
            entries,
            nonce,
            sealed,
        })
    }

    pub fn users(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(u, _)| u.as_str())
    }

    pub fn policy(&self) -> Result<Policy> {
        Policy::new(self.users().map(str::to_owned))
    }
}

/// Seals `state` for every member of `policy`. `directory` resolves a user
/// id to its registered public access key.
pub fn wrap_state<R, F>(state: &KeyState, policy: &Policy, directory: F, rng: &mut R) -> Result<WrappedKeyState>
where
    R: RngCore + CryptoRng,
    F: Fn(&str) -> Option<PublicKey>,
{
    let mut content_key = [0u8; 32];
    rng.fill_bytes(&mut content_key);

    let mut entries = Vec::with_capacity(policy.len());
    for user in policy.users() {
        let recipient = directory(user).ok_or_else(|| Error::UnknownUser(user.to_owned()))?;
        let mut eph_bytes = [0u8; 32];
        rng.fill_bytes(&mut eph_bytes);
        let eph = StaticSecret::from(eph_bytes);
        let eph_pub = PublicKey::from(&eph);
        let shared = eph.diffie_hellman(&recipient);
        let kek = kek(shared.as_bytes(), &eph_pub, &recipient, user);
        // the KEK is fresh per encapsulation, so a fixed nonce is safe
        let sealed_key = Aes256Gcm::new((&kek).into())
            .encrypt(Nonce::from_slice(&[0u8; NONCE_SIZE]), content_key.as_slice())
            .expect("in-memory AES-GCM");
        let mut encap = Vec::with_capacity(ENCAPSULATION_SIZE);
        encap.extend_from_slice(eph_pub.as_bytes());
        encap.extend_from_slice(&sealed_key);
        entries.push((user.to_owned(), encap));
    }

    let mut wrapped = WrappedKeyState {
        version: state.version,
        entries,
        nonce: [0u8; NONCE_SIZE],
        sealed: Vec::new(),
    };
    rng.fill_bytes(&mut wrapped.nonce);
    let aad = wrapped.header();
    wrapped.sealed = Aes256Gcm::new((&content_key).into())
        .encrypt(
            Nonce::from_slice(&wrapped.nonce),
            Payload {
                msg: &state.to_bytes(),
                aad: &aad,
            },
        )
        .expect("in-memory AES-GCM");
    Ok(wrapped)
}

/// Opens an envelope as `user`.
pub fn unwrap_state(wrapped: &WrappedKeyState, user: &str, access: &AccessKeyPair) -> Result<KeyState> {
    let (_, encap) = wrapped
        .entries
        .iter()
        .find(|(u, _)| u == user)
        .ok_or(Error::AccessDenied)?;
    if encap.len() != ENCAPSULATION_SIZE {
        return Err(Error::AccessDenied);
    }
    let eph_pub = PublicKey::from(<[u8; 32]>::try_from(&encap[..32]).expect("32 bytes"));
    let shared = access.secret.diffie_hellman(&eph_pub);
    let kek = kek(shared.as_bytes(), &eph_pub, &access.public, user);
    let content_key = Aes256Gcm::new((&kek).into())
        .decrypt(Nonce::from_slice(&[0u8; NONCE_SIZE]), &encap[32..])
        .map_err(|_| Error::AccessDenied)?;
    let content_key: [u8; 32] = content_key.try_into().map_err(|_| Error::AccessDenied)?;
    let plain = Aes256Gcm::new((&content_key).into())
        .decrypt(
            Nonce::from_slice(&wrapped.nonce),
            Payload {
                msg: &wrapped.sealed,
                aad: &wrapped.header(),
            },
        )
        .map_err(|_| Error::AccessDenied)?;
    let state = KeyState::from_bytes(&plain).map_err(|_| Error::AccessDenied)?;
    if state.version != wrapped.version {
        return Err(Error::AccessDenied);
    }
    Ok(state)
}

/// Public record a user registers: access key for envelopes and derivation
/// key for unwinding the states they own.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserRecord {
    pub access: PublicKey,
    pub derivation: DerivationPublicKey,
}

impl UserRecord {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(self.access.as_bytes());
        w.bytes16(&self.derivation.n.to_bytes_be());
        w.bytes16(&self.derivation.e.to_bytes_be());
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let access = PublicKey::from(r.array::<32>()?);
        let n = BigUint::from_bytes_be(r.bytes16()?);
        let e = BigUint::from_bytes_be(r.bytes16()?);
        r.finish()?;
        Ok(UserRecord {
            access,
            derivation: DerivationPublicKey { n, e },
        })
    }
}
