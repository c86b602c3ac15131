//! Core of a geo-replicated store with client-side caching.
//!
//! Scouts cache objects near the application and commit mergeable
//! transactions locally; data centres sequence, replicate and durably store
//! them. Clients observe a causally consistent, atomic view of the store,
//! restricted to updates durable at `K` data centres plus their own, so they
//! can fail over to another data centre without losing session guarantees.

pub mod clocks;
pub mod crdt;
pub mod dc;
pub mod scout;
pub mod wire;

pub use clocks::{k_stable_vector, CausalClock, ClockError, DcId, Gtid, Otid, ScoutId, VersionVector};
pub use crdt::{CrdtError, CrdtKind, CrdtState, CrdtValue, EffectOp, EffectPayload, EffectTag, ObjectId, UpdateIntent};
