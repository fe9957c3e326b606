//! Allocation-only building blocks for lossless sparse weight synchronization.
//!
//! Everything in this crate is a pure function or a state machine driven by
//! explicit inputs (bytes, timestamps, snapshots). Sockets, files, clocks and
//! threads live in the `sparsync` companion crate.
//!
//! - [`varint`]: unsigned LEB128 and gap-encoded index streams.
//! - [`tensor`], [`fusion`]: parameter sets and fused inference naming.
//! - [`codec`]: delta extraction, the `SPDC` checkpoint container, application.
//! - [`segment`]: `SPSG` segment frames, striping and reassembly.
//! - [`wire`]: session hello, control messages and data-plane control frames.
//! - [`scheduler`]: version-gated, throughput-proportional batch allocation.
//! - [`ledger`]: job leases and the result acceptance predicate.
//! - [`payload`]: analytic checkpoint-size model.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod codec;
pub mod fusion;
pub mod hash;
pub mod ledger;
pub mod payload;
pub mod scheduler;
pub mod segment;
pub mod tensor;
pub mod varint;
pub mod wire;

pub use codec::{
    apply_delta, compute_rho, extract_delta, CheckpointEncoder, CheckpointHeader, CheckpointView,
    CodecError, DeltaCheckpoint, DeltaMode, SparsityStats, TensorDelta,
};
pub use fusion::FusionMap;
pub use hash::Digest;
pub use tensor::{ElementType, ParameterSet, Tensor};
