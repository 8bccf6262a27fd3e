//! Client side of reed: identities, configuration and the upload,
//! download and rekey flows.

pub mod config;
pub mod identity;
pub mod session;

pub use config::{ClientConfig, KeyingMode, UploadOptions};
pub use identity::Identity;
pub use session::{Client, ClientCounters, RekeyMode, UploadReport};
