//! Message formats exchanged between scouts and data centres, and their
//! canonical byte encoding.
//!
//! Encoding is JSON with a fixed field order and ordered maps, so equal values
//! always encode to equal bytes. Enum variants carry their name as a tag,
//! which makes every message self-describing.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clocks::{CausalClock, DcId, Gtid, Otid, ScoutId, VersionVector};
use crate::crdt::{CrdtState, CrdtValue, EffectOp, ObjectId};

#[derive(Debug, Error)]
#[error("malformed message: {0}")]
pub struct WireError(#[from] serde_json::Error);

pub fn encode<T: Serialize>(value: &T) -> Vec<u8> {
    serde_json::to_vec(value).expect("protocol types always serialize")
}

pub fn decode<T: DeserializeOwned>(bytes: &[u8]) -> Result<T, WireError> {
    Ok(serde_json::from_slice(bytes)?)
}

/// The unit of replication: one globally committed mergeable transaction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitRecord {
    pub otid: Otid,
    /// Alias GTIDs in the order this replica learned them; the first is primary.
    pub gtids: Vec<Gtid>,
    pub deps: CausalClock,
    pub effects: Vec<EffectOp>,
}

impl CommitRecord {
    pub fn origin_session(&self) -> ScoutId {
        self.otid.origin
    }

    pub fn primary_gtid(&self) -> Option<Gtid> {
        self.gtids.first().copied()
    }

    /// Visible in the snapshot `clock` taken by `reader`.
    pub fn visible_at(&self, clock: &CausalClock, reader: ScoutId) -> bool {
        clock.sees(reader, self.otid, &self.gtids)
    }

    /// Covered by `v` under any of its aliases.
    pub fn covered_by(&self, v: &VersionVector) -> bool {
        self.gtids.iter().any(|g| v.includes(*g))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitRequest {
    pub otid: Otid,
    pub deps: CausalClock,
    pub effects: Vec<EffectOp>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CommitOutcome {
    NewGtid(Gtid),
    ExistingGtid(Gtid),
    /// The transaction was already delivered and has since been pruned at
    /// every DC; dependencies on it are always satisfied.
    NullGtid,
}

impl CommitOutcome {
    pub fn gtid(self) -> Option<Gtid> {
        match self {
            CommitOutcome::NewGtid(g) | CommitOutcome::ExistingGtid(g) => Some(g),
            CommitOutcome::NullGtid => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommitReply {
    pub otid: Otid,
    pub outcome: CommitOutcome,
}

/// Epidemic propagation between DCs; `vdc` doubles as a durability heartbeat.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GossipBatch {
    pub from: DcId,
    pub records: Vec<CommitRecord>,
    pub vdc: VersionVector,
    /// Oldest snapshot a scout attached to the sender may still pin. Peers
    /// keep it unpruned so that a stored transaction can be retried there.
    pub session_floor: VersionVector,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObjectChange {
    Effects(Vec<EffectOp>),
    Invalidate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectUpdate {
    pub object: ObjectId,
    pub change: ObjectChange,
}

/// Moves a scout from the `from` frontier to `frontier`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NotifyBatch {
    pub seq: u64,
    pub from: VersionVector,
    pub frontier: VersionVector,
    pub updates: Vec<ObjectUpdate>,
    /// GTIDs assigned to the scout's own transactions since the last batch.
    pub acks: Vec<(Otid, Gtid)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchRequest {
    pub request_id: u64,
    pub objects: Vec<ObjectId>,
    pub snapshot: CausalClock,
    pub subscribe: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchedObject {
    pub object: ObjectId,
    /// State at the requested snapshot.
    pub state: CrdtState,
    /// State at the session's latest notified frontier, when that differs
    /// from the snapshot. This is what the scout should cache.
    pub current: Option<CrdtState>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum FetchResult {
    States { objects: Vec<FetchedObject>, current_version: VersionVector },
    VersionPruned,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchReply {
    pub request_id: u64,
    pub result: FetchResult,
    /// Sequence number of the last notification sent on this session.
    pub notify_seq: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectRequest {
    pub clock: CausalClock,
    pub subscriptions: Vec<ObjectId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectReply {
    pub accepted: bool,
    pub frontier: VersionVector,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredTxRequest {
    pub name: String,
    pub params: Vec<String>,
    pub otid: Otid,
    pub deps: CausalClock,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredTxReply {
    pub otid: Otid,
    pub result: Result<StoredTxResult, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredTxResult {
    pub values: Vec<CrdtValue>,
    /// The snapshot the procedure actually read.
    pub snapshot: CausalClock,
    /// The commit record, when the procedure produced updates.
    pub record: Option<CommitRecord>,
    pub outcome: Option<CommitOutcome>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScoutRequest {
    Connect(ConnectRequest),
    Commit(CommitRequest),
    Fetch(FetchRequest),
    Unsubscribe(Vec<ObjectId>),
    StoredTx(StoredTxRequest),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum DcReply {
    Connect(ConnectReply),
    Commit(CommitReply),
    Fetch(FetchReply),
    Notify(NotifyBatch),
    StoredTx(StoredTxReply),
}

/// A message on a scout session. `epoch` distinguishes successive sessions
/// between the same pair so that late messages from a dead session are
/// ignored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionMessage<T> {
    pub scout: ScoutId,
    pub epoch: u64,
    pub body: T,
}
