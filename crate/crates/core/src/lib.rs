//! Core of the matrt runtime-control stack: the program schema model, the
//! binary runtime protocol, and the match-action table semantics shared by
//! the controller SDK and the simulated target.
//!
//! This crate is `no_std` (with `alloc`) and performs no IO. Transports,
//! file handling, and the CLI live in the `matrt` companion crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod schema;
pub mod table;
pub mod value;
pub mod wire;

#[cfg(any(test, feature = "testgen"))]
pub mod testgen;

pub use schema::{ActionSpec, FieldSpec, MatchKind, ProgramSchema, SchemaError, TableKind, TableSchema};
pub use table::{Dataplane, TableStore};
pub use wire::{
    decode, encode, ActionData, ActionParam, Body, DecodeError, EncodeError, FieldMatch, KeyError,
    MatchKey, MatchValue, Message, NotifyReason, OpStatus, Overall, PacketField, StatusCode,
    TableUpdate, UpdateOp, WriteBatch, WriteReport,
};
