//! Convergent all-or-nothing transforms and the two package schemes.
//!
//! Both schemes turn a chunk into a package one hash-length longer than the
//! transformed input, then cut the final [`STUB_SIZE`] bytes off as the stub.
//! The remaining trimmed package is a deterministic function of the chunk and
//! its MLE key, so it deduplicates; the stub is stored encrypted under the
//! file key, which is what rekeying renews.
//!
//! * Basic: `C = (M || canary) ^ G(k)`, `t = k ^ H(C)`.
//! * Enhanced: `C1 = E(k, M)`, `h = H(C1 || k)`, `C2 = (C1 || k) ^ G(h)`,
//!   `t = self_xor(C2) ^ h`.
//!
//! `G(k)` is AES-256 in counter mode over an all-zero block stream starting
//! at counter zero.

use std::fmt;

use aes::cipher::{KeyIvInit, StreamCipher};
use aes_gcm::aead::{Aead, KeyInit};
use aes_gcm::{Aes256Gcm, Nonce};
use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha256};

use crate::chunker::Fingerprint;
use crate::error::{Error, Result};

type Aes256Ctr = ctr::Ctr128BE<aes::Aes256>;

pub const HASH_SIZE: usize = 32;
pub const STUB_SIZE: usize = 64;
pub const CANARY: [u8; 32] = [0u8; 32];
pub const NONCE_SIZE: usize = 12;
pub const TAG_SIZE: usize = 16;
/// Bytes a stub file adds on top of its stubs: nonce and tag.
pub const STUB_FILE_OVERHEAD: usize = NONCE_SIZE + TAG_SIZE;
/// Smallest package either scheme produces (a one-byte chunk).
pub const MIN_PACKAGE: usize = 1 + 2 * HASH_SIZE;

macro_rules! key_type {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(Clone, Copy, PartialEq, Eq, Hash)]
        pub struct $name(pub [u8; 32]);

        impl $name {
            pub fn as_bytes(&self) -> &[u8; 32] {
                &self.0
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(concat!(stringify!($name), "(..)"))
            }
        }
    };
}

key_type!(
    /// Message-locked key issued by the key manager; never leaves the client.
    MleKey
);
key_type!(
    /// Symmetric key protecting a file's stub file.
    FileKey
);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Scheme {
    Basic = 0,
    Enhanced = 1,
}

impl Scheme {
    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            0 => Ok(Scheme::Basic),
            1 => Ok(Scheme::Enhanced),
            other => Err(Error::malformed(format!("unknown scheme id {other}"))),
        }
    }

    pub fn encrypt(self, chunk: &[u8], key: &MleKey) -> (TrimmedPackage, Stub) {
        match self {
            Scheme::Basic => basic_encrypt(chunk, key),
            Scheme::Enhanced => enhanced_encrypt(chunk, key),
        }
    }

    pub fn decrypt(self, trimmed: &[u8], stub: &Stub) -> Result<Vec<u8>> {
        match self {
            Scheme::Basic => basic_decrypt(trimmed, stub),
            Scheme::Enhanced => enhanced_decrypt(trimmed, stub),
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "basic" => Ok(Scheme::Basic),
            "enhanced" => Ok(Scheme::Enhanced),
            other => Err(Error::InvalidConfig(format!("unknown scheme {other:?}"))),
        }
    }
}

/// A full package: head followed by a 32-byte tail.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Package {
    pub head: Vec<u8>,
    pub tail: [u8; HASH_SIZE],
}

impl Package {
    pub fn len(&self) -> usize {
        self.head.len() + HASH_SIZE
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(&self.head);
        out.extend_from_slice(&self.tail);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MIN_PACKAGE {
            return Err(Error::PackageTooSmall {
                len: bytes.len(),
                stub_size: STUB_SIZE,
            });
        }
        let (head, tail) = bytes.split_at(bytes.len() - HASH_SIZE);
        Ok(Package {
            head: head.to_vec(),
            tail: tail.try_into().expect("tail length"),
        })
    }
}

/// Deduplicable part of a package.
#[derive(Clone, PartialEq, Eq)]
pub struct TrimmedPackage {
    pub bytes: Vec<u8>,
    pub fingerprint: Fingerprint,
}

impl TrimmedPackage {
    pub fn new(bytes: Vec<u8>) -> Self {
        let fingerprint = Fingerprint::of(&bytes);
        TrimmedPackage { bytes, fingerprint }
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }
}

impl fmt::Debug for TrimmedPackage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TrimmedPackage")
            .field("len", &self.bytes.len())
            .field("fingerprint", &self.fingerprint)
            .finish()
    }
}

/// Trailing bytes of a package, kept under the file key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stub(pub Vec<u8>);

impl Stub {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

fn sha256(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}

fn xor_in_place(dst: &mut [u8], src: &[u8]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d ^= s;
    }
}

fn xor32(a: &[u8; 32], b: &[u8; 32]) -> [u8; 32] {
    std::array::from_fn(|i| a[i] ^ b[i])
}

fn apply_keystream(key: &[u8; 32], buf: &mut [u8]) {
    let mut cipher = Aes256Ctr::new(key.into(), &[0u8; 16].into());
    cipher.apply_keystream(buf);
}

/// Pseudo-random mask `G(key)` of `len` bytes.
pub fn mask(key: &[u8; 32], len: usize) -> Vec<u8> {
    let mut out = vec![0u8; len];
    apply_keystream(key, &mut out);
    out
}

/// Deterministic encryption used as the inner layer of the enhanced scheme.
pub fn mle_encrypt(chunk: &[u8], key: &MleKey) -> Vec<u8> {
    let mut out = chunk.to_vec();
    apply_keystream(&key.0, &mut out);
    out
}

pub fn mle_decrypt(ciphertext: &[u8], key: &MleKey) -> Vec<u8> {
    mle_encrypt(ciphertext, key)
}

/// XOR of all consecutive 32-byte pieces of `data`; a ragged last piece is
/// zero-extended.
pub fn self_xor(data: &[u8]) -> [u8; HASH_SIZE] {
    let mut acc = [0u8; HASH_SIZE];
    for piece in data.chunks(HASH_SIZE) {
        xor_in_place(&mut acc, piece);
    }
    acc
}

/// Splits a serialized package into trimmed package and stub at
/// `len - stub_size`.
pub fn split_package(package: &[u8], stub_size: usize) -> Result<(TrimmedPackage, Stub)> {
    if package.len() <= stub_size {
        return Err(Error::PackageTooSmall {
            len: package.len(),
            stub_size,
        });
    }
    let (trimmed, stub) = package.split_at(package.len() - stub_size);
    Ok((TrimmedPackage::new(trimmed.to_vec()), Stub(stub.to_vec())))
}

pub fn join_package(trimmed: &[u8], stub: &Stub) -> Vec<u8> {
    let mut out = Vec::with_capacity(trimmed.len() + stub.0.len());
    out.extend_from_slice(trimmed);
    out.extend_from_slice(&stub.0);
    out
}

fn split_tail(package: &[u8]) -> Result<(&[u8], [u8; HASH_SIZE])> {
    if package.len() < MIN_PACKAGE {
        return Err(Error::PackageTooSmall {
            len: package.len(),
            stub_size: STUB_SIZE,
        });
    }
    let (head, tail) = package.split_at(package.len() - HASH_SIZE);
    Ok((head, tail.try_into().expect("tail length")))
}

pub fn basic_package(chunk: &[u8], key: &MleKey) -> Package {
    let mut head = Vec::with_capacity(chunk.len() + CANARY.len());
    head.extend_from_slice(chunk);
    head.extend_from_slice(&CANARY);
    apply_keystream(&key.0, &mut head);
    let tail = xor32(&key.0, &sha256(&[&head]));
    Package { head, tail }
}

pub fn basic_encrypt(chunk: &[u8], key: &MleKey) -> (TrimmedPackage, Stub) {
    assert!(!chunk.is_empty(), "chunks are at least one byte");
    split_package(&basic_package(chunk, key).to_bytes(), STUB_SIZE).expect("package exceeds stub")
}

pub fn basic_decrypt(trimmed: &[u8], stub: &Stub) -> Result<Vec<u8>> {
    let package = join_package(trimmed, stub);
    let (head, tail) = split_tail(&package)?;
    let key = xor32(&sha256(&[head]), &tail);
    let mut plain = head.to_vec();
    apply_keystream(&key, &mut plain);
    let body_len = plain.len() - CANARY.len();
    if plain[body_len..] != CANARY {
        return Err(Error::IntegrityViolation);
    }
    plain.truncate(body_len);
    Ok(plain)
}

pub fn enhanced_package(chunk: &[u8], key: &MleKey) -> Package {
    let mut head = mle_encrypt(chunk, key);
    head.extend_from_slice(&key.0);
    let hash_key = sha256(&[&head]);
    apply_keystream(&hash_key, &mut head);
    let tail = xor32(&self_xor(&head), &hash_key);
    Package { head, tail }
}

pub fn enhanced_encrypt(chunk: &[u8], key: &MleKey) -> (TrimmedPackage, Stub) {
    assert!(!chunk.is_empty(), "chunks are at least one byte");
    split_package(&enhanced_package(chunk, key).to_bytes(), STUB_SIZE).expect("package exceeds stub")
}

pub fn enhanced_decrypt(trimmed: &[u8], stub: &Stub) -> Result<Vec<u8>> {
    let package = join_package(trimmed, stub);
    let (head, tail) = split_tail(&package)?;
    let hash_key = xor32(&self_xor(head), &tail);
    let mut inner = head.to_vec();
    apply_keystream(&hash_key, &mut inner);
    if sha256(&[&inner]) != hash_key {
        return Err(Error::IntegrityViolation);
    }
    let split = inner.len() - HASH_SIZE;
    let key = MleKey(inner[split..].try_into().expect("key length"));
    inner.truncate(split);
    Ok(mle_decrypt(&inner, &key))
}

/// Stub file: `nonce || AES-256-GCM(stubs) || tag`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncryptedStubFile(pub Vec<u8>);

impl EncryptedStubFile {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn encrypt_stub_file<R: RngCore + CryptoRng>(
    stubs: &[Stub],
    key: &FileKey,
    rng: &mut R,
) -> EncryptedStubFile {
    let plain: Vec<u8> = stubs.iter().flat_map(|s| s.0.iter().copied()).collect();
    let mut nonce = [0u8; NONCE_SIZE];
    rng.fill_bytes(&mut nonce);
    let cipher = Aes256Gcm::new((&key.0).into());
    let sealed = cipher
        .encrypt(Nonce::from_slice(&nonce), plain.as_slice())
        .expect("AES-GCM encryption of in-memory buffer");
    let mut out = Vec::with_capacity(NONCE_SIZE + sealed.len());
    out.extend_from_slice(&nonce);
    out.extend_from_slice(&sealed);
    EncryptedStubFile(out)
}

/// Decrypts a stub file and splits it back into `stub_size`-byte stubs.
pub fn decrypt_stub_file(file: &EncryptedStubFile, key: &FileKey, stub_size: usize) -> Result<Vec<Stub>> {
    if file.0.len() < STUB_FILE_OVERHEAD {
        return Err(Error::AuthenticationFailure);
    }
    let (nonce, sealed) = file.0.split_at(NONCE_SIZE);
    let cipher = Aes256Gcm::new((&key.0).into());
    let plain = cipher
        .decrypt(Nonce::from_slice(nonce), sealed)
        .map_err(|_| Error::AuthenticationFailure)?;
    if plain.len() % stub_size != 0 {
        return Err(Error::malformed("stub file length is not a multiple of the stub size"));
    }
    Ok(plain.chunks(stub_size).map(|s| Stub(s.to_vec())).collect())
}
