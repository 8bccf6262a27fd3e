//! Core of the reed dedup storage system: chunking, the package schemes,
//! server-aided key generation, key regression, recipes and the wire
//! protocol. Storage, client and trace replay live in sibling crates.

pub mod chunker;
pub mod codec;
pub mod crypto;
pub mod error;
pub mod keygen;
pub mod recipe;
pub mod rekeying;
pub mod service;
pub mod wire;

pub use chunker::{Chunk, ChunkRef, ChunkingMode, ChunkingParams, Fingerprint, Segment, SegmentationParams};
pub use crypto::{FileKey, MleKey, Scheme, Stub, TrimmedPackage, STUB_SIZE};
pub use error::{Error, Result};
pub use keygen::{KeyManager, ManagerKeyPair, ManagerPublicKey, RateLimit};
pub use recipe::{FileId, FileRecipe, RecipeEntry};
pub use rekeying::{AccessKeyPair, DerivationKeyPair, DerivationPublicKey, KeyState, Policy, UserRecord, WrappedKeyState};
pub use service::{KeyService, PutAck, StoreService, StoreStats};
