//! Server-aided MLE key generation over blind RSA.
//!
//! The client sends `fp * r^e mod N`, the key manager raises it to `d`, and
//! the client multiplies by `r^-1`, checks `s^e == fp` and hashes the
//! fixed-width encoding of `s` into the MLE key. The manager never sees `fp`.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use num_bigint::{BigUint, RandBigInt};
use num_integer::Integer;
use num_traits::{One, Zero};
use rand::{CryptoRng, RngCore};
use sha2::{Digest, Sha256};

use crate::chunker::Fingerprint;
use crate::crypto::MleKey;
use crate::error::{Error, Result};

pub const DEFAULT_MODULUS_BITS: usize = 1024;
pub const DEFAULT_BATCH_CAP: usize = 256;
pub const DEFAULT_RATE_CAPACITY: u64 = 10_000;
pub const DEFAULT_RATE_REFILL: f64 = 10_000.0;

/// Big-endian encoding of `x` left-padded to `width` bytes.
pub fn to_fixed_be(x: &BigUint, width: usize) -> Vec<u8> {
    let raw = x.to_bytes_be();
    assert!(raw.len() <= width, "value wider than {width} bytes");
    let mut out = vec![0u8; width - raw.len()];
    out.extend_from_slice(&raw);
    out
}

pub fn fingerprint_to_int(fp: &Fingerprint) -> BigUint {
    BigUint::from_bytes_be(fp.as_bytes())
}

/// Generates an RSA key with the given modulus size.
pub(crate) fn generate_rsa<R: RngCore + CryptoRng>(
    rng: &mut R,
    bits: usize,
) -> Result<rsa::RsaPrivateKey> {
    rsa::RsaPrivateKey::new(rng, bits).map_err(|e| Error::InvalidConfig(format!("RSA key generation: {e}")))
}

pub(crate) fn convert(x: &rsa::BigUint) -> BigUint {
    BigUint::from_bytes_be(&x.to_bytes_be())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManagerPublicKey {
    pub n: BigUint,
    pub e: BigUint,
}

impl ManagerPublicKey {
    /// Width in bytes of values on the wire.
    pub fn modulus_len(&self) -> usize {
        (self.n.bits() as usize).div_ceil(8)
    }
}

/// System-wide key pair of the key manager. Signing uses the CRT form.
#[derive(Clone)]
pub struct ManagerKeyPair {
    public: ManagerPublicKey,
    d: BigUint,
    p: BigUint,
    q: BigUint,
    dp: BigUint,
    dq: BigUint,
    qinv: BigUint,
}

impl std::fmt::Debug for ManagerKeyPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ManagerKeyPair")
            .field("bits", &self.public.n.bits())
            .finish_non_exhaustive()
    }
}

impl ManagerKeyPair {
    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R, bits: usize) -> Result<Self> {
        use rsa::traits::{PrivateKeyParts, PublicKeyParts};
        let key = generate_rsa(rng, bits)?;
        let primes = key.primes();
        Self::from_components(
            convert(key.n()),
            convert(key.e()),
            convert(key.d()),
            convert(&primes[0]),
            convert(&primes[1]),
        )
    }

    pub fn from_components(n: BigUint, e: BigUint, d: BigUint, p: BigUint, q: BigUint) -> Result<Self> {
        if &p * &q != n {
            return Err(Error::InvalidConfig("RSA primes do not multiply to the modulus".into()));
        }
        let one = BigUint::one();
        let dp = &d % (&p - &one);
        let dq = &d % (&q - &one);
        let qinv = q
            .modinv(&p)
            .ok_or_else(|| Error::InvalidConfig("RSA primes are not coprime".into()))?;
        Ok(ManagerKeyPair {
            public: ManagerPublicKey { n, e },
            d,
            p,
            q,
            dp,
            dq,
            qinv,
        })
    }

    pub fn public(&self) -> &ManagerPublicKey {
        &self.public
    }

    pub fn private_exponent(&self) -> &BigUint {
        &self.d
    }

    pub fn primes(&self) -> (&BigUint, &BigUint) {
        (&self.p, &self.q)
    }

    /// `x^d mod N`.
    pub fn sign(&self, x: &BigUint) -> Result<BigUint> {
        if x.is_zero() || x >= &self.public.n {
            return Err(Error::InvalidOperand);
        }
        let m1 = x.modpow(&self.dp, &self.p);
        let m2 = x.modpow(&self.dq, &self.q);
        let diff = if m1 >= m2 {
            &m1 - &m2
        } else {
            &self.p - ((&m2 - &m1) % &self.p)
        };
        let h = (&self.qinv * diff) % &self.p;
        Ok(m2 + h * &self.q)
    }
}

/// A blinded fingerprint and the client-held unblinding factor.
#[derive(Clone)]
pub struct BlindedRequest {
    pub value: BigUint,
    fingerprint: BigUint,
    r_inv: BigUint,
}

impl std::fmt::Debug for BlindedRequest {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BlindedRequest").finish_non_exhaustive()
    }
}

/// Blinds `fp` with a fresh random `r` coprime to `N`.
pub fn blind<R: RngCore + CryptoRng>(fp: &Fingerprint, pk: &ManagerPublicKey, rng: &mut R) -> Result<BlindedRequest> {
    let one = BigUint::one();
    let r = loop {
        let r = rng.gen_biguint_range(&one, &pk.n);
        if r.gcd(&pk.n).is_one() {
            break r;
        }
    };
    blind_with(fp, pk, &r)
}

/// Blinds with a caller-chosen factor. `r = 1` leaves the fingerprint in
/// the clear and exists for tests.
pub fn blind_with(fp: &Fingerprint, pk: &ManagerPublicKey, r: &BigUint) -> Result<BlindedRequest> {
    let m = fingerprint_to_int(fp);
    if m.is_zero() {
        return Err(Error::ZeroFingerprint);
    }
    if m >= pk.n {
        return Err(Error::InvalidOperand);
    }
    let r_inv = r.modinv(&pk.n).ok_or(Error::InvalidOperand)?;
    let value = (&m * r.modpow(&pk.e, &pk.n)) % &pk.n;
    Ok(BlindedRequest {
        value,
        fingerprint: m,
        r_inv,
    })
}

/// Removes the blinding factor, verifies the signature and hashes it.
pub fn unblind(signed: &BigUint, req: &BlindedRequest, pk: &ManagerPublicKey) -> Result<MleKey> {
    if signed.is_zero() || signed >= &pk.n {
        return Err(Error::SignatureInvalid);
    }
    let s = (signed * &req.r_inv) % &pk.n;
    if s.modpow(&pk.e, &pk.n) != req.fingerprint {
        return Err(Error::SignatureInvalid);
    }
    Ok(key_from_signature(&s, pk))
}

/// `SHA-256` of the fixed-width big-endian signature.
pub fn key_from_signature(s: &BigUint, pk: &ManagerPublicKey) -> MleKey {
    MleKey(Sha256::digest(to_fixed_be(s, pk.modulus_len())).into())
}

#[derive(Clone, Copy, Debug)]
pub struct RateLimit {
    pub capacity: u64,
    pub refill_per_sec: f64,
}

impl Default for RateLimit {
    fn default() -> Self {
        RateLimit {
            capacity: DEFAULT_RATE_CAPACITY,
            refill_per_sec: DEFAULT_RATE_REFILL,
        }
    }
}

impl RateLimit {
    pub fn unlimited() -> Self {
        RateLimit {
            capacity: u64::MAX,
            refill_per_sec: f64::INFINITY,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TokenBucket {
    limit: RateLimit,
    tokens: f64,
    last: Instant,
}

impl TokenBucket {
    pub fn new(limit: RateLimit, now: Instant) -> Self {
        TokenBucket {
            limit,
            tokens: limit.capacity as f64,
            last: now,
        }
    }

    pub fn tokens(&self) -> f64 {
        self.tokens
    }

    /// Takes `n` tokens, or none and fails when fewer are available.
    pub fn try_take(&mut self, n: u64, now: Instant) -> Result<()> {
        let elapsed = now.saturating_duration_since(self.last).as_secs_f64();
        self.last = now.max(self.last);
        let cap = self.limit.capacity as f64;
        if elapsed > 0.0 {
            self.tokens = (self.tokens + elapsed * self.limit.refill_per_sec).min(cap);
        }
        let need = n as f64;
        if self.tokens >= need {
            self.tokens -= need;
            Ok(())
        } else {
            Err(Error::RateLimited)
        }
    }
}

/// Per-client token buckets.
#[derive(Debug)]
pub struct RateLimiter {
    limit: RateLimit,
    buckets: Mutex<HashMap<String, TokenBucket>>,
}

impl RateLimiter {
    pub fn new(limit: RateLimit) -> Self {
        RateLimiter {
            limit,
            buckets: Mutex::new(HashMap::new()),
        }
    }

    pub fn try_take(&self, client: &str, n: u64, now: Instant) -> Result<()> {
        let mut buckets = self.buckets.lock().expect("rate limiter poisoned");
        buckets
            .entry(client.to_owned())
            .or_insert_with(|| TokenBucket::new(self.limit, now))
            .try_take(n, now)
    }
}

/// Counters exposed by the key manager.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct KeyManagerStats {
    /// Batches received.
    pub requests: u64,
    /// Individual signatures issued.
    pub signatures: u64,
}

/// The signing service, independent of transport.
#[derive(Debug)]
pub struct KeyManager {
    keypair: ManagerKeyPair,
    limiter: RateLimiter,
    batch_cap: usize,
    requests: AtomicU64,
    signatures: AtomicU64,
}

impl KeyManager {
    pub fn new(keypair: ManagerKeyPair, limit: RateLimit, batch_cap: usize) -> Self {
        KeyManager {
            keypair,
            limiter: RateLimiter::new(limit),
            batch_cap,
            requests: AtomicU64::new(0),
            signatures: AtomicU64::new(0),
        }
    }

    pub fn public_key(&self) -> &ManagerPublicKey {
        self.keypair.public()
    }

    pub fn keypair(&self) -> &ManagerKeyPair {
        &self.keypair
    }

    pub fn batch_cap(&self) -> usize {
        self.batch_cap
    }

    /// Signs a batch for `client`, consuming one token per element.
    pub fn sign_batch(&self, client: &str, blinded: &[BigUint]) -> Result<Vec<BigUint>> {
        self.sign_batch_at(client, blinded, Instant::now())
    }

    pub fn sign_batch_at(&self, client: &str, blinded: &[BigUint], now: Instant) -> Result<Vec<BigUint>> {
        if blinded.len() > self.batch_cap {
            return Err(Error::BatchTooLarge {
                len: blinded.len(),
                cap: self.batch_cap,
            });
        }
        let n = &self.keypair.public().n;
        if blinded.iter().any(|x| x.is_zero() || x >= n) {
            return Err(Error::InvalidOperand);
        }
        self.limiter.try_take(client, blinded.len() as u64, now)?;
        self.requests.fetch_add(1, Ordering::Relaxed);
        self.signatures.fetch_add(blinded.len() as u64, Ordering::Relaxed);
        blinded.iter().map(|x| self.keypair.sign(x)).collect()
    }

    pub fn stats(&self) -> KeyManagerStats {
        KeyManagerStats {
            requests: self.requests.load(Ordering::Relaxed),
            signatures: self.signatures.load(Ordering::Relaxed),
        }
    }
}
