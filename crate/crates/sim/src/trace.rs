//! Run traces: one JSON object per line.
//!
//! The first line is a header carrying the schema tag and the full scenario,
//! so a trace can be re-checked without the file it came from. Each further
//! line is one timestamped event.

use std::io::{BufRead, Write};

use causeway_core::clocks::{CausalClock, DcId, Gtid, Otid, ScoutId, VersionVector};
use causeway_core::crdt::{CrdtState, CrdtValue, EffectOp, ObjectId};
use causeway_core::dc::{DcStats, RemoteOutcome};
use causeway_core::wire::{CommitOutcome, StoredTxResult};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scenario::{Fault, SimConfig};

pub const TRACE_SCHEMA: &str = "causeway-trace/1";

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("trace schema is {0:?}, expected {TRACE_SCHEMA:?}")]
    Schema(String),
    #[error("empty trace")]
    Empty,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TxOutcome {
    Committed,
    ReadOnly,
    Aborted(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event")]
pub enum Event {
    /// Database contents every DC starts from.
    Initial { objects: Vec<(ObjectId, CrdtState)> },
    TxBegin { scout: ScoutId, otid: Otid, snapshot: CausalClock, class: String, warmup: bool },
    /// `served_at` is when the DC produced the value; equal to the event time
    /// for cache hits.
    Read { scout: ScoutId, otid: Otid, object: ObjectId, value: CrdtValue, from_cache: bool, served_at: u64 },
    Update { scout: ScoutId, otid: Otid, effect: EffectOp },
    LocalCommit { scout: ScoutId, otid: Otid, snapshot: CausalClock, effects: Vec<EffectOp> },
    StoredTx { scout: ScoutId, otid: Otid, name: String, deps: CausalClock, result: Result<StoredTxResult, String> },
    TxEnd { scout: ScoutId, otid: Otid, outcome: TxOutcome, round_trips: u32, started: u64 },
    CommitAck { scout: ScoutId, otid: Otid, outcome: CommitOutcome },
    /// `effects` is filled in when the DC logged a new record.
    GlobalCommit { dc: DcId, otid: Otid, outcome: CommitOutcome, deps: CausalClock, effects: Vec<EffectOp> },
    RemoteApply { dc: DcId, otid: Otid, gtid: Gtid, outcome: RemoteOutcome },
    GossipDeliver { from: DcId, to: DcId, records: usize },
    Notify { scout: ScoutId, dc: DcId, seq: u64, frontier: VersionVector, updates: usize },
    Connect { scout: ScoutId, dc: DcId, accepted: bool, frontier: VersionVector },
    SessionLost { scout: ScoutId },
    /// The scout adopted a frontier older than its clock.
    Regression { scout: ScoutId, from: VersionVector, to: VersionVector },
    Fault { fault: Fault },
    FrontierAdvance { dc: DcId, visible: VersionVector, vdc: VersionVector },
    Quiesce,
    FinalDc {
        dc: DcId,
        up: bool,
        vdc: VersionVector,
        visible: VersionVector,
        prune_vector: VersionVector,
        objects: Vec<(ObjectId, CrdtState)>,
        stats: DcStats,
    },
    FinalScout {
        scout: ScoutId,
        clock: CausalClock,
        connected: Option<DcId>,
        offline: bool,
        pending: Vec<Otid>,
        completed: usize,
        script_len: usize,
    },
    End { quiesced: bool, messages: u64, gossip_messages: u64, dropped_messages: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub t: u64,
    #[serde(flatten)]
    pub event: Event,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    schema: String,
    config: SimConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub config: SimConfig,
    pub records: Vec<Record>,
}

impl Trace {
    pub fn write_jsonl(&self, mut w: impl Write) -> std::io::Result<()> {
        let header = Header { schema: TRACE_SCHEMA.to_string(), config: self.config.clone() };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_jsonl(&mut out).expect("writing to memory cannot fail");
        out
    }

    pub fn read_jsonl(r: impl BufRead) -> Result<Self, TraceError> {
        let mut lines = r.lines().enumerate();
        let (_, first) = lines.next().ok_or(TraceError::Empty)?;
        let header: Header = serde_json::from_str(&first?)
            .map_err(|e| TraceError::Malformed { line: 1, message: e.to_string() })?;
        if header.schema != TRACE_SCHEMA {
            return Err(TraceError::Schema(header.schema));
        }
        let mut records = Vec::new();
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec = serde_json::from_str(&line)
                .map_err(|e| TraceError::Malformed { line: i + 1, message: e.to_string() })?;
            records.push(rec);
        }
        Ok(Trace { config: header.config, records })
    }

    pub fn from_jsonl(bytes: &[u8]) -> Result<Self, TraceError> {
        Self::read_jsonl(bytes)
    }

    pub fn events(&self) -> impl Iterator<Item = (u64, &Event)> {
        self.records.iter().map(|r| (r.t, &r.event))
    }
}
