use std::io;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the system can report, shared by the library, the
/// services and the wire protocol so that errors survive a round trip.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("integrity violation: package failed verification")]
    IntegrityViolation,
    #[error("package of {len} bytes is too small for a {stub_size}-byte stub")]
    PackageTooSmall { len: usize, stub_size: usize },
    #[error("authentication failure: wrong key or tampered ciphertext")]
    AuthenticationFailure,
    #[error("fingerprint maps to zero")]
    ZeroFingerprint,
    #[error("rate limited by key manager")]
    RateLimited,
    #[error("operand outside the modulus range")]
    InvalidOperand,
    #[error("key manager returned an invalid signature")]
    SignatureInvalid,
    #[error("caller does not own the key state")]
    NotOwner,
    #[error("key state is already at version 0")]
    AtInitialState,
    #[error("unknown user: {0}")]
    UnknownUser(String),
    #[error("access denied")]
    AccessDenied,
    #[error("trimmed package does not match its fingerprint")]
    FingerprintMismatch,
    #[error("not found: {0}")]
    NotFound(String),
    #[error("version conflict: expected {expected:?}, found {actual:?}")]
    VersionConflict {
        expected: Option<u32>,
        actual: Option<u32>,
    },
    #[error("already exists: {0}")]
    AlreadyExists(String),
    #[error("policy names no users")]
    PolicyEmpty,
    #[error("batch of {len} exceeds the cap of {cap}")]
    BatchTooLarge { len: usize, cap: usize },
    #[error("trace line {line}: {message}")]
    TraceParse { line: usize, message: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("malformed data: {0}")]
    Malformed(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("storage unavailable: {0}")]
    StorageUnavailable(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub fn malformed(what: impl Into<String>) -> Self {
        Error::Malformed(what.into())
    }

    /// Numeric code carried in wire error frames.
    pub fn code(&self) -> u16 {
        match self {
            Error::IntegrityViolation => 1,
            Error::PackageTooSmall { .. } => 2,
            Error::AuthenticationFailure => 3,
            Error::ZeroFingerprint => 4,
            Error::RateLimited => 5,
            Error::InvalidOperand => 6,
            Error::SignatureInvalid => 7,
            Error::NotOwner => 8,
            Error::AtInitialState => 9,
            Error::UnknownUser(_) => 10,
            Error::AccessDenied => 11,
            Error::FingerprintMismatch => 12,
            Error::NotFound(_) => 13,
            Error::VersionConflict { .. } => 14,
            Error::AlreadyExists(_) => 15,
            Error::PolicyEmpty => 16,
            Error::BatchTooLarge { .. } => 17,
            Error::TraceParse { .. } => 18,
            Error::InvalidConfig(_) => 19,
            Error::Malformed(_) => 20,
            Error::Protocol(_) => 21,
            Error::StorageUnavailable(_) | Error::Io(_) => 22,
            Error::Transport(_) => 23,
        }
    }

    /// Rebuilds an error received in a wire error frame. Structured fields
    /// that are not carried on the wire come back empty.
    pub fn from_code(code: u16, message: String) -> Self {
        match code {
            1 => Error::IntegrityViolation,
            2 => Error::PackageTooSmall {
                len: 0,
                stub_size: 0,
            },
            3 => Error::AuthenticationFailure,
            4 => Error::ZeroFingerprint,
            5 => Error::RateLimited,
            6 => Error::InvalidOperand,
            7 => Error::SignatureInvalid,
            8 => Error::NotOwner,
            9 => Error::AtInitialState,
            10 => Error::UnknownUser(message),
            11 => Error::AccessDenied,
            12 => Error::FingerprintMismatch,
            13 => Error::NotFound(message),
            14 => Error::VersionConflict {
                expected: None,
                actual: None,
            },
            15 => Error::AlreadyExists(message),
            16 => Error::PolicyEmpty,
            17 => Error::BatchTooLarge { len: 0, cap: 0 },
            18 => Error::TraceParse { line: 0, message },
            19 => Error::InvalidConfig(message),
            20 => Error::Malformed(message),
            22 => Error::StorageUnavailable(message),
            23 => Error::Transport(message),
            _ => Error::Protocol(message),
        }
    }
}
