//! Deterministic-ordering cross-shard transaction processing.
//!
//! The crate models a sharded ledger where untrusted coalitions pre-execute
//! transactions, a stateless sequence shard fixes a conflict-free global order,
//! and shards execute that order, exchange validity proofs, and confirm or
//! invalidate transactions asynchronously. OCC and 2PL cross-shard mechanisms
//! are included as baselines, together with a monolithic reference executor
//! used to check serializability.
//!
//! Everything runs inside a deterministic discrete-event simulator: a run is a
//! pure function of its configuration and seed.

pub mod baselines;
pub mod config;
pub mod engine;
pub mod error;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod preexec;
pub mod runtime;
pub mod sequencer;
pub mod simnet;
pub mod workload;

pub use config::{ExperimentConfig, Mechanism};
pub use error::{Error, Result};
pub use metrics::MetricsReport;
