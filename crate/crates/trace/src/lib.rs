//! Trace-driven storage measurements: synthetic backup traces, replay
//! through the full upload path, and a brute-force oracle for the
//! expected physical size.

pub mod oracle;
pub mod replay;
pub mod trace;

pub use replay::{replay, Mode, ReplayParams, SavingsReport, SnapshotRow};
pub use trace::{generate_trace, synthesize_chunk, GenParams, Record, Snapshot, Trace};
