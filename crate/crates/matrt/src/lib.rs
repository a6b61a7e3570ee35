//! matrt: a self-contained runtime-control stack for match-action
//! targets — a controller SDK with batched table configuration, a
//! simulated switch target, and a benchmark harness.
//!
//! The pure protocol and table semantics live in [`matrt_core`]; this
//! crate adds the TCP transports, the target server, the client session
//! layer, the benchmark machinery, and the CLI binaries (`simswitch`
//! and `bench`).

pub mod bench;
pub mod client;
pub mod frame;
pub mod stats;
pub mod target;

pub use client::{
    BuildError, ClientError, ConnectOptions, EntryBuilder, FieldValue, NotifyEvent, Session,
    Subscription, TimedReport,
};
pub use target::{serve, TargetConfig, TargetHandle};
