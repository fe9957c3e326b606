//! Runtime for sparse-delta weight synchronization: checkpoint store, WAN
//! link emulation, multi-stream transport, hub and actor roles, and the
//! scenario harness.

pub mod actor;
pub mod control;
pub mod events;
pub mod harness;
pub mod hub;
pub mod link;
pub mod scenario;
pub mod store;
pub mod synth;
pub mod transport;
