//! Storage server: fingerprint index, container packing, the data and key
//! stores, and TCP endpoints for the store and the key manager.

pub mod blobs;
pub mod container;
pub mod index;
pub mod manager;
pub mod net;
pub mod server;

pub use server::{DedupStore, StoreConfig, DEFAULT_CONTAINER_SIZE};
