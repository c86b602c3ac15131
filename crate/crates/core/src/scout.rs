//! Client-side replica.
//!
//! A scout caches a subset of objects, runs one interactive transaction at a
//! time against a frozen snapshot, commits locally without waiting for the
//! network and forwards commit records to its data centre in order. It sees
//! updates of other scouts only once they are durable at `K` DCs, which lets
//! it switch to any DC that has caught up with what it has observed.
//!
//! Like the DC, the scout is a state machine: methods return the messages to
//! send, and network input is fed back through [`Scout::on_message`].

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clocks::{CausalClock, DcId, Gtid, Otid, ScoutId, VersionVector};
use crate::crdt::{CrdtError, CrdtState, CrdtValue, EffectOp, EffectTag, ObjectId, UpdateIntent};
use crate::wire::{
    CommitOutcome, CommitRequest, ConnectRequest, DcReply, FetchRequest, FetchResult, NotifyBatch, ObjectChange,
    ScoutRequest, SessionMessage, StoredTxRequest, StoredTxResult,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ScoutError {
    #[error("a transaction is already active")]
    TransactionActive,
    #[error("no active transaction")]
    NoTransaction,
    #[error("{0} must be read before it is updated")]
    NotRead(ObjectId),
    #[error("object not cached and no DC is reachable")]
    Unavailable,
    #[error("the snapshot's version was pruned at the DC")]
    ReadFailed,
    #[error("a read is already waiting for the DC")]
    ReadInProgress,
    #[error("every cache slot is pinned")]
    CachePinOverflow,
    #[error(transparent)]
    Crdt(#[from] CrdtError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoutConfig {
    pub id: ScoutId,
    pub num_dcs: usize,
    pub cache_capacity: usize,
    /// Refuse DCs whose visible frontier is behind the scout. Disabled only
    /// to demonstrate what the check prevents.
    pub k_gating: bool,
    /// Swap the first two commit requests on the session. Used only to check
    /// that the resulting lost update is detected.
    pub reorder_session: bool,
}

impl ScoutConfig {
    pub fn new(id: ScoutId, num_dcs: usize, cache_capacity: usize) -> Self {
        Self { id, num_dcs, cache_capacity, k_gating: true, reorder_session: false }
    }
}

/// How far a locally committed transaction has progressed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Durability {
    Local,
    /// Acknowledged by at least one DC.
    Global,
    KDurable,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SessionState {
    Disconnected,
    Connecting { dc: DcId, epoch: u64 },
    Connected { dc: DcId, epoch: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct CacheEntry {
    state: CrdtState,
    /// DC part of the version held; own transactions are always included.
    version: VersionVector,
    pinned: bool,
    /// Last notification sequence number on the session already reflected.
    sub_seq: u64,
    last_used: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingCommit {
    pub request: CommitRequest,
    pub gtids: Vec<Gtid>,
}

#[derive(Debug, Clone)]
struct ActiveTx {
    otid: Otid,
    snapshot: CausalClock,
    copies: BTreeMap<ObjectId, CrdtState>,
    effects: Vec<EffectOp>,
}

#[derive(Debug, Clone)]
struct PendingRead {
    request_id: u64,
    objects: Vec<ObjectId>,
}

/// A message for the DC the scout is (being) connected to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScoutOutbound {
    pub dc: DcId,
    pub msg: SessionMessage<ScoutRequest>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ReadStep {
    Ready(Vec<(ObjectId, CrdtValue)>),
    /// The listed objects must be fetched; the values arrive as
    /// [`ScoutEvent::ReadCompleted`].
    Fetch { request_id: u64, missing: Vec<ObjectId>, message: ScoutOutbound },
}

/// Result of a local commit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalCommit {
    pub otid: Otid,
    pub snapshot: CausalClock,
    pub effects: Vec<EffectOp>,
    pub messages: Vec<ScoutOutbound>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScoutEvent {
    Connected { dc: DcId, frontier: VersionVector },
    ConnectRejected { dc: DcId, frontier: VersionVector },
    ReadCompleted { request_id: u64, result: Result<Vec<(ObjectId, CrdtValue)>, ScoutError> },
    CommitAcked { otid: Otid, outcome: CommitOutcome },
    /// A notification was applied and the clock moved.
    Advanced { seq: u64, clock: CausalClock },
    StoredTxCompleted { otid: Otid, result: Result<StoredTxResult, String> },
    /// The clock moved backwards, which only happens with the frontier
    /// check disabled.
    Regression { from: VersionVector, to: VersionVector },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ScoutOutput {
    pub messages: Vec<ScoutOutbound>,
    pub events: Vec<ScoutEvent>,
}

pub struct Scout {
    cfg: ScoutConfig,
    clock: CausalClock,
    next_counter: u64,
    cache: BTreeMap<ObjectId, CacheEntry>,
    pin_requests: BTreeSet<ObjectId>,
    use_tick: u64,
    pending: Vec<PendingCommit>,
    held_commit: Option<CommitRequest>,
    reorder_done: bool,
    session: SessionState,
    next_epoch: u64,
    next_request: u64,
    tx: Option<ActiveTx>,
    read: Option<PendingRead>,
    buffered: Vec<NotifyBatch>,
    stored_in_flight: Option<StoredTxRequest>,
}

impl Scout {
    pub fn new(cfg: ScoutConfig) -> Self {
        Self {
            clock: CausalClock::zero(cfg.num_dcs),
            cfg,
            next_counter: 1,
            cache: BTreeMap::new(),
            pin_requests: BTreeSet::new(),
            use_tick: 0,
            pending: Vec::new(),
            held_commit: None,
            reorder_done: false,
            session: SessionState::Disconnected,
            next_epoch: 1,
            next_request: 1,
            tx: None,
            read: None,
            buffered: Vec::new(),
            stored_in_flight: None,
        }
    }

    pub fn id(&self) -> ScoutId {
        self.cfg.id
    }

    pub fn clock(&self) -> &CausalClock {
        &self.clock
    }

    pub fn session(&self) -> &SessionState {
        &self.session
    }

    pub fn connected_dc(&self) -> Option<DcId> {
        match self.session {
            SessionState::Connected { dc, .. } => Some(dc),
            _ => None,
        }
    }

    pub fn pending_commits(&self) -> &[PendingCommit] {
        &self.pending
    }

    pub fn has_active_tx(&self) -> bool {
        self.tx.is_some()
    }

    pub fn is_cached(&self, obj: &ObjectId) -> bool {
        self.cache.contains_key(obj)
    }

    pub fn cached_objects(&self) -> Vec<ObjectId> {
        self.cache.keys().cloned().collect()
    }

    pub fn durability(&self, otid: Otid) -> Durability {
        match self.pending.iter().find(|p| p.request.otid == otid) {
            Some(p) if p.gtids.is_empty() => Durability::Local,
            Some(_) => Durability::Global,
            None if self.held_commit.as_ref().is_some_and(|h| h.otid == otid) => Durability::Local,
            None => Durability::KDurable,
        }
    }

    fn outbound(&self, body: ScoutRequest) -> Option<ScoutOutbound> {
        match self.session {
            SessionState::Connected { dc, epoch } => {
                Some(ScoutOutbound { dc, msg: SessionMessage { scout: self.cfg.id, epoch, body } })
            }
            _ => None,
        }
    }

    /// Starts a transaction at the current clock.
    pub fn begin(&mut self) -> Result<(Otid, CausalClock), ScoutError> {
        if self.tx.is_some() {
            return Err(ScoutError::TransactionActive);
        }
        let otid = Otid::new(self.next_counter, self.cfg.id);
        self.next_counter += 1;
        let snapshot = self.clock.clone();
        self.tx = Some(ActiveTx { otid, snapshot: snapshot.clone(), copies: BTreeMap::new(), effects: Vec::new() });
        Ok((otid, snapshot))
    }

    fn touch(&mut self, obj: &ObjectId) {
        self.use_tick += 1;
        if let Some(e) = self.cache.get_mut(obj) {
            e.last_used = self.use_tick;
        }
    }

    /// Reads objects in the active transaction. Objects already read, or
    /// cached at the snapshot, are served locally; the rest are fetched in a
    /// single request.
    pub fn read(&mut self, objects: &[ObjectId]) -> Result<ReadStep, ScoutError> {
        let tx = self.tx.as_ref().ok_or(ScoutError::NoTransaction)?;
        if self.read.is_some() {
            return Err(ScoutError::ReadInProgress);
        }
        let snapshot = tx.snapshot.clone();
        let mut missing = Vec::new();
        for obj in objects {
            if self.tx.as_ref().expect("checked").copies.contains_key(obj) {
                continue;
            }
            match self.cache.get(obj) {
                Some(e) if e.version == snapshot.dc => {
                    let state = e.state.clone();
                    self.touch(obj);
                    self.tx.as_mut().expect("checked").copies.insert(obj.clone(), state);
                }
                _ => {
                    if !missing.contains(obj) {
                        missing.push(obj.clone());
                    }
                }
            }
        }
        if missing.is_empty() {
            return Ok(ReadStep::Ready(self.values_of(objects)));
        }
        let request_id = self.next_request;
        self.next_request += 1;
        let fetch = FetchRequest {
            request_id,
            objects: missing.clone(),
            snapshot,
            subscribe: self.cfg.cache_capacity > 0,
        };
        let message = self.outbound(ScoutRequest::Fetch(fetch)).ok_or(ScoutError::Unavailable)?;
        self.read = Some(PendingRead { request_id, objects: objects.to_vec() });
        Ok(ReadStep::Fetch { request_id, missing, message })
    }

    fn values_of(&self, objects: &[ObjectId]) -> Vec<(ObjectId, CrdtValue)> {
        let tx = self.tx.as_ref().expect("called with an active transaction");
        objects.iter().map(|o| (o.clone(), tx.copies[o].value())).collect()
    }

    /// Buffers an update in the active transaction.
    pub fn update(&mut self, obj: &ObjectId, intent: &UpdateIntent) -> Result<EffectOp, ScoutError> {
        let tx = self.tx.as_mut().ok_or(ScoutError::NoTransaction)?;
        let state = tx.copies.get_mut(obj).ok_or_else(|| ScoutError::NotRead(obj.clone()))?;
        let tag = EffectTag::new(tx.otid, tx.effects.len() as u32);
        let effect = state.prepare(obj, intent, tag)?;
        state.apply(&effect)?;
        tx.effects.push(effect.clone());
        Ok(effect)
    }

    /// Discards the active transaction.
    pub fn rollback(&mut self) -> ScoutOutput {
        self.tx = None;
        self.read = None;
        self.after_transaction()
    }

    /// Commits the active transaction locally and queues it for global
    /// commit. Read-only transactions leave no trace.
    pub fn commit(&mut self) -> Result<(LocalCommit, ScoutOutput), ScoutError> {
        let tx = self.tx.take().ok_or(ScoutError::NoTransaction)?;
        self.read = None;
        let mut messages = Vec::new();
        if !tx.effects.is_empty() {
            for e in &tx.effects {
                if let Some(entry) = self.cache.get_mut(&e.target) {
                    entry.state.apply(e)?;
                }
            }
            self.clock.local = tx.otid.counter;
            let request = CommitRequest { otid: tx.otid, deps: tx.snapshot.clone(), effects: tx.effects.clone() };
            self.pending.push(PendingCommit { request: request.clone(), gtids: Vec::new() });
            messages.extend(self.send_commit(request));
        }
        let local = LocalCommit { otid: tx.otid, snapshot: tx.snapshot, effects: tx.effects, messages };
        Ok((local, self.after_transaction()))
    }

    fn send_commit(&mut self, request: CommitRequest) -> Vec<ScoutOutbound> {
        if self.connected_dc().is_none() {
            return Vec::new();
        }
        if self.cfg.reorder_session && !self.reorder_done {
            match self.held_commit.take() {
                None => {
                    self.held_commit = Some(request);
                    return Vec::new();
                }
                Some(first) => {
                    self.reorder_done = true;
                    return [request, first]
                        .into_iter()
                        .filter_map(|r| self.outbound(ScoutRequest::Commit(r)))
                        .collect();
                }
            }
        }
        self.outbound(ScoutRequest::Commit(request)).into_iter().collect()
    }

    /// Runs a registered procedure at the DC with a client-chosen OTID and
    /// snapshot, so that a retry anywhere is deduplicated.
    pub fn exec_stored_tx(&mut self, name: &str, params: Vec<String>) -> Result<ScoutOutbound, ScoutError> {
        if self.tx.is_some() || self.stored_in_flight.is_some() {
            return Err(ScoutError::TransactionActive);
        }
        if self.connected_dc().is_none() {
            return Err(ScoutError::Unavailable);
        }
        let otid = Otid::new(self.next_counter, self.cfg.id);
        self.next_counter += 1;
        let req = StoredTxRequest { name: name.to_string(), params, otid, deps: self.clock.clone() };
        self.stored_in_flight = Some(req.clone());
        Ok(self.outbound(ScoutRequest::StoredTx(req)).expect("connected"))
    }

    pub fn stored_tx_in_flight(&self) -> Option<&StoredTxRequest> {
        self.stored_in_flight.as_ref()
    }

    /// Adds an object to the cache, evicting the least recently used unpinned
    /// entry if full. Returns the evicted objects.
    pub fn cache_admit(
        &mut self,
        obj: ObjectId,
        state: CrdtState,
        version: VersionVector,
        sub_seq: u64,
        pin: bool,
    ) -> Result<Vec<ObjectId>, ScoutError> {
        let cap = self.cfg.cache_capacity;
        if pin {
            self.pin_requests.insert(obj.clone());
        }
        let pin = self.pin_requests.contains(&obj);
        let mut evicted = Vec::new();
        if !self.cache.contains_key(&obj) {
            while self.cache.len() >= cap {
                let victim = self
                    .cache
                    .iter()
                    .filter(|(_, e)| !e.pinned)
                    .min_by_key(|(_, e)| e.last_used)
                    .map(|(k, _)| k.clone())
                    .ok_or(ScoutError::CachePinOverflow)?;
                self.cache.remove(&victim);
                evicted.push(victim);
            }
        }
        self.use_tick += 1;
        self.cache.insert(obj, CacheEntry { state, version, pinned: pin, sub_seq, last_used: self.use_tick });
        Ok(evicted)
    }

    /// Keeps `obj` in the cache regardless of recency once it is admitted.
    pub fn pin(&mut self, obj: &ObjectId) -> Result<(), ScoutError> {
        if self.pin_requests.contains(obj) {
            return Ok(());
        }
        if self.pin_requests.len() >= self.cfg.cache_capacity {
            return Err(ScoutError::CachePinOverflow);
        }
        self.pin_requests.insert(obj.clone());
        if let Some(e) = self.cache.get_mut(obj) {
            e.pinned = true;
        }
        Ok(())
    }

    pub fn unpin(&mut self, obj: &ObjectId) {
        self.pin_requests.remove(obj);
        if let Some(e) = self.cache.get_mut(obj) {
            e.pinned = false;
        }
    }

    /// Opens a session with `dc`. The DC accepts only if it has caught up
    /// with everything the scout has observed.
    pub fn connect(&mut self, dc: DcId) -> ScoutOutbound {
        let epoch = self.next_epoch;
        self.next_epoch += 1;
        self.session = SessionState::Connecting { dc, epoch };
        let subscriptions = self.cache.iter().filter(|(_, e)| e.version == self.clock.dc).map(|(k, _)| k.clone()).collect();
        ScoutOutbound {
            dc,
            msg: SessionMessage {
                scout: self.cfg.id,
                epoch,
                body: ScoutRequest::Connect(ConnectRequest { clock: self.clock.clone(), subscriptions }),
            },
        }
    }

    /// The session broke (DC crash, partition, or diversion). A read waiting
    /// for the DC fails; a stored transaction is retried after reconnecting.
    pub fn session_lost(&mut self) -> ScoutOutput {
        self.session = SessionState::Disconnected;
        let mut out = ScoutOutput::default();
        if let Some(r) = self.read.take() {
            out.events.push(ScoutEvent::ReadCompleted { request_id: r.request_id, result: Err(ScoutError::Unavailable) });
        }
        out
    }

    /// Handles a message from a DC.
    pub fn on_message(&mut self, msg: SessionMessage<DcReply>) -> ScoutOutput {
        let mut out = ScoutOutput::default();
        match msg.body {
            DcReply::Connect(reply) => {
                let SessionState::Connecting { dc, epoch } = self.session else { return out };
                if epoch != msg.epoch {
                    return out;
                }
                let caught_up = self.clock.dc.leq(&reply.frontier).unwrap_or(false);
                if !reply.accepted || (self.cfg.k_gating && !caught_up) {
                    self.session = SessionState::Disconnected;
                    out.events.push(ScoutEvent::ConnectRejected { dc, frontier: reply.frontier });
                    return out;
                }
                self.session = SessionState::Connected { dc, epoch };
                // Batches held back during a transaction are numbered within
                // the old session and must not touch entries of the new one.
                self.buffered.clear();
                if !caught_up {
                    // Only reachable with the frontier check disabled: adopt
                    // the DC's view even though it may be older.
                    out.events.push(ScoutEvent::Regression { from: self.clock.dc.clone(), to: reply.frontier.clone() });
                    self.clock.dc = reply.frontier.clone();
                }
                let clock = self.clock.dc.clone();
                self.cache.retain(|_, e| e.version == clock);
                for e in self.cache.values_mut() {
                    e.sub_seq = 0;
                }
                out.events.push(ScoutEvent::Connected { dc, frontier: reply.frontier });
                let mut replay: Vec<CommitRequest> = self.pending.iter().map(|p| p.request.clone()).collect();
                if let Some(h) = self.held_commit.take() {
                    replay.push(h);
                    replay.sort_by_key(|r| r.otid.counter);
                }
                for r in replay {
                    out.messages.extend(self.outbound(ScoutRequest::Commit(r)));
                }
                if let Some(st) = self.stored_in_flight.clone() {
                    out.messages.extend(self.outbound(ScoutRequest::StoredTx(st)));
                }
            }
            _ if !self.is_current_session(msg.epoch) => {}
            DcReply::Commit(reply) => {
                self.record_outcome(reply.otid, reply.outcome);
                out.events.push(ScoutEvent::CommitAcked { otid: reply.otid, outcome: reply.outcome });
            }
            DcReply::Fetch(reply) => self.on_fetch_reply(reply, &mut out),
            DcReply::Notify(batch) => {
                if self.tx.is_some() {
                    self.buffered.push(batch);
                } else {
                    self.apply_notification(batch, &mut out);
                }
            }
            DcReply::StoredTx(reply) => {
                if self.stored_in_flight.as_ref().is_none_or(|r| r.otid != reply.otid) {
                    return out;
                }
                let req = self.stored_in_flight.take().expect("checked above");
                if let Ok(res) = &reply.result {
                    if let Some(rec) = &res.record {
                        for e in &rec.effects {
                            if let Some(entry) = self.cache.get_mut(&e.target) {
                                entry.state.apply(e).expect("DC-prepared effects match their targets");
                            }
                        }
                        self.clock.local = req.otid.counter;
                        let gtids = res.outcome.and_then(CommitOutcome::gtid).into_iter().collect();
                        let request = CommitRequest { otid: req.otid, deps: rec.deps.clone(), effects: rec.effects.clone() };
                        if res.outcome != Some(CommitOutcome::NullGtid) {
                            self.pending.push(PendingCommit { request, gtids });
                        }
                    }
                }
                out.events.push(ScoutEvent::StoredTxCompleted { otid: reply.otid, result: reply.result });
            }
        }
        out
    }

    fn is_current_session(&self, epoch: u64) -> bool {
        matches!(self.session, SessionState::Connected { epoch: e, .. } if e == epoch)
    }

    fn record_outcome(&mut self, otid: Otid, outcome: CommitOutcome) {
        match outcome {
            CommitOutcome::NullGtid => self.pending.retain(|p| p.request.otid != otid),
            CommitOutcome::NewGtid(g) | CommitOutcome::ExistingGtid(g) => {
                if let Some(p) = self.pending.iter_mut().find(|p| p.request.otid == otid) {
                    if !p.gtids.contains(&g) {
                        p.gtids.push(g);
                    }
                }
            }
        }
        self.drop_durable_pending();
    }

    fn drop_durable_pending(&mut self) {
        let dc = &self.clock.dc;
        self.pending.retain(|p| !p.gtids.iter().any(|g| dc.includes(*g)));
    }

    fn on_fetch_reply(&mut self, reply: crate::wire::FetchReply, out: &mut ScoutOutput) {
        let Some(pending) = self.read.take_if(|r| r.request_id == reply.request_id) else { return };
        let FetchResult::States { objects, current_version } = reply.result else {
            out.events.push(ScoutEvent::ReadCompleted { request_id: pending.request_id, result: Err(ScoutError::ReadFailed) });
            return;
        };
        let Some(tx) = self.tx.as_mut() else { return };
        let snapshot_dc = tx.snapshot.dc.clone();
        for fetched in &objects {
            tx.copies.insert(fetched.object.clone(), fetched.state.clone());
        }
        let mut unsubscribe = Vec::new();
        for fetched in objects {
            if self.cfg.cache_capacity == 0 {
                continue;
            }
            let (state, version) = match fetched.current {
                Some(cur) => (cur, current_version.clone()),
                None => (fetched.state, snapshot_dc.clone()),
            };
            match self.cache_admit(fetched.object.clone(), state, version, reply.notify_seq, false) {
                Ok(evicted) => unsubscribe.extend(evicted),
                Err(_) => unsubscribe.push(fetched.object),
            }
        }
        unsubscribe.retain(|o| !self.cache.contains_key(o));
        unsubscribe.sort();
        unsubscribe.dedup();
        if !unsubscribe.is_empty() {
            out.messages.extend(self.outbound(ScoutRequest::Unsubscribe(unsubscribe)));
        }
        let values = self.values_of(&pending.objects);
        out.events.push(ScoutEvent::ReadCompleted { request_id: pending.request_id, result: Ok(values) });
    }

    fn after_transaction(&mut self) -> ScoutOutput {
        let mut out = ScoutOutput::default();
        for batch in std::mem::take(&mut self.buffered) {
            self.apply_notification(batch, &mut out);
        }
        out
    }

    /// Moves the clock to the batch's frontier, updating or invalidating the
    /// cached objects it touches.
    fn apply_notification(&mut self, batch: NotifyBatch, out: &mut ScoutOutput) {
        let regress = !self.clock.dc.leq(&batch.frontier).unwrap_or(false);
        if regress {
            if self.cfg.k_gating {
                return;
            }
            out.events.push(ScoutEvent::Regression { from: self.clock.dc.clone(), to: batch.frontier.clone() });
        }
        for (otid, gtid) in &batch.acks {
            if let Some(p) = self.pending.iter_mut().find(|p| p.request.otid == *otid) {
                if !p.gtids.contains(gtid) {
                    p.gtids.push(*gtid);
                }
            }
        }
        let changes: BTreeMap<&ObjectId, &ObjectChange> = batch.updates.iter().map(|u| (&u.object, &u.change)).collect();
        let mut dropped = Vec::new();
        for (obj, entry) in self.cache.iter_mut() {
            let ahead = entry.sub_seq >= batch.seq && batch.frontier.leq(&entry.version).unwrap_or(false);
            if ahead {
                continue;
            }
            if entry.version == batch.from && entry.sub_seq < batch.seq {
                match changes.get(obj) {
                    None => {}
                    Some(ObjectChange::Effects(effects)) => {
                        for e in effects {
                            entry.state.apply(e).expect("notified effects match their targets");
                        }
                    }
                    Some(ObjectChange::Invalidate) => {
                        dropped.push(obj.clone());
                        continue;
                    }
                }
                entry.version = batch.frontier.clone();
                entry.sub_seq = batch.seq;
            } else {
                dropped.push(obj.clone());
            }
        }
        for obj in &dropped {
            self.cache.remove(obj);
        }
        let to_unsubscribe: Vec<ObjectId> = dropped
            .into_iter()
            .filter(|o| !matches!(changes.get(o), Some(ObjectChange::Invalidate)))
            .collect();
        if !to_unsubscribe.is_empty() {
            out.messages.extend(self.outbound(ScoutRequest::Unsubscribe(to_unsubscribe)));
        }
        self.clock.dc = batch.frontier.clone();
        self.drop_durable_pending();
        out.events.push(ScoutEvent::Advanced { seq: batch.seq, clock: self.clock.clone() });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crdt::CrdtKind;
    use crate::dc::{DataCentre, DcConfig, DcOutbound};

    const C: ScoutId = ScoutId(3);

    fn frd(who: &str) -> ObjectId {
        ObjectId::new(format!("{who}.frd"), CrdtKind::AwSet)
    }

    fn scout(capacity: usize) -> Scout {
        Scout::new(ScoutConfig::new(C, 2, capacity))
    }

    fn set(items: &[&str]) -> CrdtValue {
        CrdtValue::Set(items.iter().map(|s| s.to_string()).collect())
    }

    /// Delivers every message between one scout and one DC until quiet.
    fn pump(s: &mut Scout, d: &mut DataCentre, mut msgs: Vec<ScoutOutbound>) -> Vec<ScoutEvent> {
        let mut events = Vec::new();
        while !msgs.is_empty() {
            let mut replies = Vec::new();
            for m in msgs.drain(..) {
                for o in d.on_scout_message(m.msg) {
                    if let DcOutbound::Scout(r) = o {
                        replies.push(r);
                    }
                }
            }
            for r in replies {
                let out = s.on_message(r);
                msgs.extend(out.messages);
                events.extend(out.events);
            }
        }
        events
    }

    fn notify(s: &mut Scout, d: &mut DataCentre) -> Vec<ScoutEvent> {
        let mut events = Vec::new();
        for n in d.notify_scouts() {
            events.extend(s.on_message(n).events);
        }
        events
    }

    fn connected(capacity: usize) -> (Scout, DataCentre) {
        let mut s = scout(capacity);
        let mut d = DataCentre::new(DcConfig::new(DcId(0), 2, 1));
        let m = s.connect(DcId(0));
        let ev = pump(&mut s, &mut d, vec![m]);
        assert!(matches!(ev[0], ScoutEvent::Connected { .. }));
        (s, d)
    }

    fn read_now(s: &mut Scout, objs: &[ObjectId]) -> Vec<(ObjectId, CrdtValue)> {
        match s.read(objs).unwrap() {
            ReadStep::Ready(v) => v,
            other => panic!("expected a cache hit, got {other:?}"),
        }
    }

    fn read_remote(s: &mut Scout, d: &mut DataCentre, objs: &[ObjectId]) -> Vec<(ObjectId, CrdtValue)> {
        let ReadStep::Fetch { message, .. } = s.read(objs).unwrap() else { panic!("expected a miss") };
        fetched(s, d, message)
    }

    fn read_any(s: &mut Scout, d: &mut DataCentre, objs: &[ObjectId]) -> Vec<(ObjectId, CrdtValue)> {
        match s.read(objs).unwrap() {
            ReadStep::Ready(v) => v,
            ReadStep::Fetch { message, .. } => fetched(s, d, message),
        }
    }

    fn fetched(s: &mut Scout, d: &mut DataCentre, message: ScoutOutbound) -> Vec<(ObjectId, CrdtValue)> {
        let events = pump(s, d, vec![message]);
        events
            .into_iter()
            .find_map(|e| match e {
                ScoutEvent::ReadCompleted { result, .. } => Some(result.unwrap()),
                _ => None,
            })
            .expect("read completes")
    }

    #[test]
    fn fresh_scout_begins_at_zero() {
        let mut s = scout(4);
        let (otid, snap) = s.begin().unwrap();
        assert_eq!(otid, Otid::new(1, C));
        assert_eq!(snap.to_string(), "[0,0|0]");
        assert_eq!(s.begin(), Err(ScoutError::TransactionActive));
    }

    #[test]
    fn running_example_transaction_commits_locally() {
        let (mut s, mut d) = connected(8);
        // Warm C.frd into the cache.
        s.begin().unwrap();
        read_remote(&mut s, &mut d, &[frd("C")]);
        s.commit().unwrap();
        s.begin().unwrap();
        assert_eq!(read_now(&mut s, &[frd("C")])[0].1, set(&[]));
        assert_eq!(read_remote(&mut s, &mut d, &[frd("B")])[0].1, set(&[]));
        s.update(&frd("B"), &UpdateIntent::Add("C".into())).unwrap();
        s.update(&frd("C"), &UpdateIntent::Add("B".into())).unwrap();
        assert_eq!(read_now(&mut s, &[frd("B")])[0].1, set(&["C"]));
        let (local, out) = s.commit().unwrap();
        assert_eq!(local.otid, Otid::new(2, C));
        assert_eq!(local.effects.len(), 2);
        assert_eq!(s.clock().to_string(), "[0,0|2]");
        assert_eq!(s.durability(local.otid), Durability::Local);
        let events = pump(&mut s, &mut d, local.messages);
        assert!(out.messages.is_empty());
        assert!(matches!(events[0], ScoutEvent::CommitAcked { outcome: CommitOutcome::NewGtid(_), .. }));
        assert_eq!(s.durability(local.otid), Durability::Global);
        // Next transaction sees its own update from the cache.
        let (_, snap) = s.begin().unwrap();
        assert_eq!(snap.local, 2);
        assert_eq!(read_now(&mut s, &[frd("B")])[0].1, set(&["C"]));
        s.commit().unwrap();
        notify(&mut s, &mut d);
        assert_eq!(s.durability(local.otid), Durability::KDurable);
        assert!(s.pending_commits().is_empty());
    }

    #[test]
    fn read_only_transactions_do_not_queue_commits() {
        let (mut s, mut d) = connected(8);
        s.begin().unwrap();
        read_remote(&mut s, &mut d, &[frd("A")]);
        let (local, _) = s.commit().unwrap();
        assert!(local.messages.is_empty());
        assert!(s.pending_commits().is_empty());
        assert_eq!(s.clock().local, 0);
    }

    #[test]
    fn multi_read_of_missing_objects_is_one_request() {
        let (mut s, _d) = connected(8);
        s.begin().unwrap();
        let ReadStep::Fetch { missing, .. } = s.read(&[frd("A"), frd("B"), frd("C")]).unwrap() else { panic!() };
        assert_eq!(missing.len(), 3);
    }

    #[test]
    fn update_requires_a_prior_read() {
        let mut s = scout(2);
        s.begin().unwrap();
        assert_eq!(s.update(&frd("B"), &UpdateIntent::Add("x".into())), Err(ScoutError::NotRead(frd("B"))));
    }

    #[test]
    fn rollback_discards_updates() {
        let (mut s, mut d) = connected(8);
        s.begin().unwrap();
        read_remote(&mut s, &mut d, &[frd("A")]);
        s.update(&frd("A"), &UpdateIntent::Add("x".into())).unwrap();
        s.rollback();
        s.begin().unwrap();
        assert_eq!(read_now(&mut s, &[frd("A")])[0].1, set(&[]));
        assert!(s.pending_commits().is_empty());
    }

    #[test]
    fn miss_while_disconnected_is_unavailable() {
        let mut s = scout(2);
        s.begin().unwrap();
        assert_eq!(s.read(&[frd("A")]), Err(ScoutError::Unavailable));
    }

    #[test]
    fn lru_evicts_least_recently_used() {
        let mut s = scout(2);
        let v = VersionVector::zero(2);
        let st = CrdtState::new(CrdtKind::AwSet);
        s.cache_admit(frd("a"), st.clone(), v.clone(), 0, false).unwrap();
        s.cache_admit(frd("b"), st.clone(), v.clone(), 0, false).unwrap();
        s.begin().unwrap();
        read_now(&mut s, &[frd("a")]);
        s.rollback();
        let evicted = s.cache_admit(frd("c"), st, v, 0, false).unwrap();
        assert_eq!(evicted, vec![frd("b")]);
    }

    #[test]
    fn pinned_entries_are_never_evicted() {
        let mut s = scout(2);
        let v = VersionVector::zero(2);
        let st = CrdtState::new(CrdtKind::AwSet);
        s.cache_admit(frd("a"), st.clone(), v.clone(), 0, true).unwrap();
        s.cache_admit(frd("b"), st.clone(), v.clone(), 0, false).unwrap();
        let evicted = s.cache_admit(frd("c"), st.clone(), v.clone(), 0, false).unwrap();
        assert_eq!(evicted, vec![frd("b")]);
        s.pin(&frd("c")).unwrap();
        assert_eq!(s.cache_admit(frd("d"), st, v, 0, false), Err(ScoutError::CachePinOverflow));
        assert_eq!(s.pin(&frd("e")), Err(ScoutError::CachePinOverflow));
    }

    #[test]
    fn notifications_update_cached_objects_and_advance_the_clock() {
        let (mut s, mut d) = connected(8);
        s.begin().unwrap();
        read_remote(&mut s, &mut d, &[frd("B")]);
        s.commit().unwrap();
        let t = Otid::new(1, ScoutId(1));
        let effect = CrdtState::new(CrdtKind::AwSet).prepare(&frd("B"), &UpdateIntent::Add("A".into()), EffectTag::new(t, 0)).unwrap();
        d.global_commit(&CommitRequest { otid: t, deps: CausalClock::zero(2), effects: vec![effect] }).unwrap();
        let events = notify(&mut s, &mut d);
        assert!(matches!(events[0], ScoutEvent::Advanced { .. }));
        assert_eq!(s.clock().dc, VersionVector::from_entries(vec![1, 0]));
        s.begin().unwrap();
        assert_eq!(read_now(&mut s, &[frd("B")])[0].1, set(&["A"]));
    }

    #[test]
    fn notifications_wait_for_the_open_transaction() {
        let (mut s, mut d) = connected(8);
        s.begin().unwrap();
        read_remote(&mut s, &mut d, &[frd("B")]);
        let t = Otid::new(1, ScoutId(1));
        d.global_commit(&CommitRequest { otid: t, deps: CausalClock::zero(2), effects: vec![] }).unwrap();
        notify(&mut s, &mut d);
        assert_eq!(s.clock().dc, VersionVector::zero(2));
        let (_, out) = s.commit().unwrap();
        assert!(out.events.iter().any(|e| matches!(e, ScoutEvent::Advanced { .. })));
        assert_eq!(s.clock().dc, VersionVector::from_entries(vec![1, 0]));
    }

    #[test]
    fn fetch_during_in_flight_notification_stays_cached() {
        let (mut s, mut d) = connected(8);
        let t = Otid::new(1, ScoutId(1));
        let effect = CrdtState::new(CrdtKind::AwSet).prepare(&frd("B"), &UpdateIntent::Add("A".into()), EffectTag::new(t, 0)).unwrap();
        d.global_commit(&CommitRequest { otid: t, deps: CausalClock::zero(2), effects: vec![effect] }).unwrap();
        s.begin().unwrap();
        // The DC notifies before serving the fetch; the batch is buffered.
        notify(&mut s, &mut d);
        assert_eq!(read_remote(&mut s, &mut d, &[frd("B")])[0].1, set(&[]));
        s.commit().unwrap();
        assert_eq!(s.clock().dc, VersionVector::from_entries(vec![1, 0]));
        s.begin().unwrap();
        assert_eq!(read_now(&mut s, &[frd("B")])[0].1, set(&["A"]));
    }

    #[test]
    fn batch_buffered_before_failover_is_dropped() {
        let (mut s, mut d0) = connected(8);
        let t = Otid::new(1, ScoutId(1));
        let effect = CrdtState::new(CrdtKind::AwSet).prepare(&frd("B"), &UpdateIntent::Add("A".into()), EffectTag::new(t, 0)).unwrap();
        d0.global_commit(&CommitRequest { otid: t, deps: CausalClock::zero(2), effects: vec![effect] }).unwrap();
        s.begin().unwrap();
        notify(&mut s, &mut d0);
        s.session_lost();
        let mut d1 = DataCentre::new(DcConfig::new(DcId(1), 2, 1));
        let m = s.connect(DcId(1));
        pump(&mut s, &mut d1, vec![m]);
        assert_eq!(read_remote(&mut s, &mut d1, &[frd("B")])[0].1, set(&[]));
        s.commit().unwrap();
        // Applying the old batch would claim "A" is visible without its effect.
        assert_eq!(s.clock().dc, VersionVector::zero(2));
        s.begin().unwrap();
        assert_eq!(read_now(&mut s, &[frd("B")])[0].1, set(&[]));
    }

    #[test]
    fn failover_is_rejected_by_a_lagging_dc_and_replays_pending() {
        let (mut s, mut d0) = connected(8);
        s.begin().unwrap();
        read_remote(&mut s, &mut d0, &[frd("B")]);
        s.update(&frd("B"), &UpdateIntent::Add("x".into())).unwrap();
        let (local, _) = s.commit().unwrap();
        // Lose the commit request: the DC never sees it.
        drop(local.messages);
        let t = Otid::new(1, ScoutId(1));
        d0.global_commit(&CommitRequest { otid: t, deps: CausalClock::zero(2), effects: vec![] }).unwrap();
        notify(&mut s, &mut d0);
        s.session_lost();
        let mut d1 = DataCentre::new(DcConfig::new(DcId(1), 2, 1));
        let m = s.connect(DcId(1));
        let ev = pump(&mut s, &mut d1, vec![m]);
        assert!(matches!(ev[0], ScoutEvent::ConnectRejected { .. }));
        let m = s.connect(DcId(0));
        let ev = pump(&mut s, &mut d0, vec![m]);
        assert!(matches!(ev[0], ScoutEvent::Connected { .. }));
        assert!(ev.iter().any(|e| matches!(e, ScoutEvent::CommitAcked { outcome: CommitOutcome::NewGtid(_), .. })));
        // A second replay of the same commit is recognised.
        s.session_lost();
        let m = s.connect(DcId(0));
        let ev = pump(&mut s, &mut d0, vec![m]);
        assert!(ev.iter().any(|e| matches!(e, ScoutEvent::CommitAcked { outcome: CommitOutcome::ExistingGtid(_), .. })));
        assert_eq!(d0.stats().duplicate_applications, 0);
    }

    #[test]
    fn reorder_mutation_swaps_the_first_two_commits() {
        let mut s = Scout::new(ScoutConfig { reorder_session: true, ..ScoutConfig::new(C, 2, 8) });
        let mut d = DataCentre::new(DcConfig::new(DcId(0), 2, 1));
        let m = s.connect(DcId(0));
        pump(&mut s, &mut d, vec![m]);
        let mut msgs = Vec::new();
        for _ in 0..2 {
            s.begin().unwrap();
            read_any(&mut s, &mut d, &[frd("A")]);
            s.update(&frd("A"), &UpdateIntent::Add("x".into())).unwrap();
            msgs.extend(s.commit().unwrap().0.messages);
        }
        let ev = pump(&mut s, &mut d, msgs);
        let outcomes: Vec<CommitOutcome> = ev
            .iter()
            .filter_map(|e| match e {
                ScoutEvent::CommitAcked { outcome, .. } => Some(*outcome),
                _ => None,
            })
            .collect();
        assert_eq!(outcomes[1], CommitOutcome::NullGtid);
    }

    fn bump(ctx: &mut crate::dc::StoredTxContext<'_>, params: &[String]) -> Result<Vec<CrdtValue>, crate::dc::DcError> {
        let obj = ObjectId::new(params[0].as_str(), CrdtKind::Counter);
        ctx.update(&obj, &UpdateIntent::Increment(1))?;
        Ok(vec![ctx.read(&obj)?])
    }

    #[test]
    fn stored_transaction_is_retried_after_session_loss() {
        let (mut s, mut d) = connected(8);
        d.register_procedure("bump", bump);
        let m = s.exec_stored_tx("bump", vec!["c".into()]).unwrap();
        // The DC runs it but the reply is lost.
        d.on_scout_message(m.msg);
        s.session_lost();
        let m = s.connect(DcId(0));
        let ev = pump(&mut s, &mut d, vec![m]);
        let done = ev.iter().find_map(|e| match e {
            ScoutEvent::StoredTxCompleted { result, .. } => Some(result.clone().unwrap()),
            _ => None,
        });
        assert_eq!(done.unwrap().values, vec![CrdtValue::Counter(1)]);
        assert_eq!(d.materialized()[&ObjectId::new("c", CrdtKind::Counter)].value(), CrdtValue::Counter(1));
        assert_eq!(s.clock().local, 1);
    }
}
