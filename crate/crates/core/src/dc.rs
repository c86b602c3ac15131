//! Data-centre replica.
//!
//! A DC holds a full copy of the database as a durable log of commit records
//! on top of a per-object checkpoint. It assigns GTIDs to transactions
//! submitted by scouts, exchanges records with peer DCs by gossip, tracks which
//! transactions are durable at `K` DCs, and serves versioned reads and
//! notifications to connected scouts.
//!
//! The replica is a plain state machine: callers feed it messages and get back
//! the messages it wants to send. It never blocks and never reads a clock.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clocks::{k_stable_vector, CausalClock, ClockError, DcId, Gtid, Otid, ScoutId, VersionVector};
use crate::crdt::{CrdtError, CrdtState, CrdtValue, EffectOp, EffectTag, ObjectId, UpdateIntent};
use crate::wire::{
    CommitOutcome, CommitRecord, CommitReply, CommitRequest, ConnectReply, ConnectRequest, DcReply, FetchReply,
    FetchRequest, FetchResult, FetchedObject, GossipBatch, NotifyBatch, ObjectChange, ObjectUpdate, ScoutRequest,
    SessionMessage, StoredTxReply, StoredTxRequest, StoredTxResult,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DcError {
    #[error("requested snapshot is older than the pruned prefix")]
    VersionPruned,
    #[error("no stored procedure named {0:?}")]
    UnknownProcedure(String),
    #[error("stored procedure failed: {0}")]
    Procedure(String),
    #[error(transparent)]
    Crdt(#[from] CrdtError),
    #[error(transparent)]
    Clock(#[from] ClockError),
}

/// How notification batches describe changes to subscribed objects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NotifyMode {
    #[default]
    Effects,
    /// Send invalidation markers only; the scout refetches on the next read.
    Invalidate,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DcConfig {
    pub id: DcId,
    pub num_dcs: usize,
    /// Durability threshold for visibility to scouts.
    pub k: usize,
    pub notify_mode: NotifyMode,
    /// Filter duplicate submissions by OTID. Disabled only to demonstrate
    /// what the filter prevents.
    pub dedup: bool,
    /// Restrict what scouts see to K-durable updates. Disabled only to
    /// demonstrate what the gate prevents.
    pub k_gating: bool,
}

impl DcConfig {
    pub fn new(id: DcId, num_dcs: usize, k: usize) -> Self {
        Self { id, num_dcs, k, notify_mode: NotifyMode::Effects, dedup: true, k_gating: true }
    }
}

/// State that survives a crash.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DurableState {
    pub vdc: VersionVector,
    pub log: Vec<CommitRecord>,
    pub checkpoint: BTreeMap<ObjectId, CrdtState>,
    pub prune_vector: VersionVector,
    pub max_otid: BTreeMap<ScoutId, u64>,
    pub stored_results: BTreeMap<Otid, StoredTxResult>,
}

impl DurableState {
    pub fn new(num_dcs: usize) -> Self {
        Self {
            vdc: VersionVector::zero(num_dcs),
            log: Vec::new(),
            checkpoint: BTreeMap::new(),
            prune_vector: VersionVector::zero(num_dcs),
            max_otid: BTreeMap::new(),
            stored_results: BTreeMap::new(),
        }
    }
}

/// Result of processing one remote delivery of a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RemoteOutcome {
    Applied,
    Deferred,
    AliasRecorded,
    Duplicate,
}

/// Observable protocol steps, for tracing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum DcEvent {
    GlobalCommit { otid: Otid, outcome: CommitOutcome, deps: CausalClock },
    RemoteApply { otid: Otid, gtid: Gtid, outcome: RemoteOutcome },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DcOutbound {
    Scout(SessionMessage<DcReply>),
    Peer { to: DcId, batch: GossipBatch },
}

/// A deterministic procedure run at the DC against a fixed snapshot.
pub type StoredProcedure = fn(&mut StoredTxContext<'_>, &[String]) -> Result<Vec<CrdtValue>, DcError>;

#[derive(Debug, Clone)]
struct Session {
    epoch: u64,
    subscriptions: BTreeSet<ObjectId>,
    last_frontier: VersionVector,
    notify_seq: u64,
    announced: u64,
    inbox: VecDeque<ScoutRequest>,
}

/// Where an effect lives in the log.
#[derive(Debug, Clone, Copy)]
struct EffectRef {
    record: usize,
    effect: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DcStats {
    pub effect_applications: u64,
    /// Applications of an effect whose tag had already been applied here.
    pub duplicate_applications: u64,
    pub duplicate_tags: Vec<EffectTag>,
    pub max_session_queue: usize,
    pub max_pending_remote: usize,
}

pub struct DataCentre {
    cfg: DcConfig,
    durable: DurableState,
    /// Materialized state at `vdc`.
    current: BTreeMap<ObjectId, CrdtState>,
    by_otid: BTreeMap<Otid, usize>,
    effects_by_object: BTreeMap<ObjectId, Vec<EffectRef>>,
    known: Vec<VersionVector>,
    /// Last session floor gossiped by each peer.
    peer_floors: Vec<VersionVector>,
    pending_remote: BTreeMap<Gtid, CommitRecord>,
    sessions: BTreeMap<ScoutId, Session>,
    procedures: BTreeMap<String, StoredProcedure>,
    applied_tags: BTreeSet<EffectTag>,
    stats: DcStats,
    events: Vec<DcEvent>,
}

/// How a global commit attempt ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CommitStatus {
    Done(CommitOutcome),
    /// Dependencies are not yet satisfied locally.
    Waiting,
}

impl DataCentre {
    pub fn new(cfg: DcConfig) -> Self {
        let durable = DurableState::new(cfg.num_dcs);
        Self::from_durable(cfg, durable)
    }

    /// Rebuilds a replica from its durable state, as after a crash.
    pub fn from_durable(cfg: DcConfig, durable: DurableState) -> Self {
        let n = cfg.num_dcs;
        let mut dc = Self {
            known: vec![VersionVector::zero(n); n],
            peer_floors: vec![VersionVector::zero(n); n],
            cfg,
            durable,
            current: BTreeMap::new(),
            by_otid: BTreeMap::new(),
            effects_by_object: BTreeMap::new(),
            pending_remote: BTreeMap::new(),
            sessions: BTreeMap::new(),
            procedures: BTreeMap::new(),
            applied_tags: BTreeSet::new(),
            stats: DcStats::default(),
            events: Vec::new(),
        };
        dc.known[dc.cfg.id.index()] = dc.durable.vdc.clone();
        dc.rebuild_indexes();
        dc
    }

    /// Loses volatile state and restarts from the durable state. Registered
    /// procedures and instrumentation are kept.
    pub fn crash(&mut self) {
        let durable = self.durable.clone();
        let mut fresh = Self::from_durable(self.cfg.clone(), durable);
        fresh.procedures = std::mem::take(&mut self.procedures);
        fresh.applied_tags = std::mem::take(&mut self.applied_tags);
        fresh.stats = std::mem::take(&mut self.stats);
        *self = fresh;
    }

    fn rebuild_indexes(&mut self) {
        self.by_otid.clear();
        self.effects_by_object.clear();
        self.current = self.durable.checkpoint.clone();
        for (ri, rec) in self.durable.log.iter().enumerate() {
            self.by_otid.insert(rec.otid, ri);
            for (ei, e) in rec.effects.iter().enumerate() {
                self.effects_by_object.entry(e.target.clone()).or_default().push(EffectRef { record: ri, effect: ei });
                self.current
                    .entry(e.target.clone())
                    .or_insert_with(|| CrdtState::new(e.target.kind))
                    .apply(e)
                    .expect("logged effects match their targets");
            }
        }
    }

    pub fn register_procedure(&mut self, name: impl Into<String>, proc_: StoredProcedure) {
        self.procedures.insert(name.into(), proc_);
    }

    pub fn id(&self) -> DcId {
        self.cfg.id
    }

    pub fn config(&self) -> &DcConfig {
        &self.cfg
    }

    pub fn vdc(&self) -> &VersionVector {
        &self.durable.vdc
    }

    pub fn durable(&self) -> &DurableState {
        &self.durable
    }

    pub fn stats(&self) -> &DcStats {
        &self.stats
    }

    pub fn prune_vector(&self) -> &VersionVector {
        &self.durable.prune_vector
    }

    pub fn max_otid(&self, scout: ScoutId) -> u64 {
        self.durable.max_otid.get(&scout).copied().unwrap_or(0)
    }

    pub fn log(&self) -> &[CommitRecord] {
        &self.durable.log
    }

    pub fn pending_remote_len(&self) -> usize {
        self.pending_remote.len()
    }

    pub fn session_queue_len(&self) -> usize {
        self.sessions.values().map(|s| s.inbox.len()).sum()
    }

    pub fn has_session(&self, scout: ScoutId) -> bool {
        self.sessions.contains_key(&scout)
    }

    pub fn known_vector(&self, dc: DcId) -> &VersionVector {
        &self.known[dc.index()]
    }

    pub fn take_events(&mut self) -> Vec<DcEvent> {
        std::mem::take(&mut self.events)
    }

    /// Materialized state of every object at `vdc`.
    pub fn materialized(&self) -> &BTreeMap<ObjectId, CrdtState> {
        &self.current
    }

    /// Merges a peer's version vector into what this DC knows about it.
    pub fn observe_peer_vector(&mut self, peer: DcId, v: &VersionVector) {
        if peer != self.cfg.id {
            self.known[peer.index()].merge(v).expect("vectors share the DC domain");
        }
    }

    /// Transactions known durable at `k` DCs or more.
    pub fn k_durable_frontier(&self, k: usize) -> Result<VersionVector, ClockError> {
        let mut all = self.known.clone();
        all[self.cfg.id.index()] = self.durable.vdc.clone();
        k_stable_vector(&all, k)
    }

    /// What scouts connected here may observe from other scouts: K-durable
    /// transactions this DC has itself applied.
    pub fn visible_frontier(&self) -> VersionVector {
        if !self.cfg.k_gating {
            return self.durable.vdc.clone();
        }
        let stable = self.k_durable_frontier(self.cfg.k).expect("k validated at configuration");
        stable.meet(&self.durable.vdc).expect("same domain")
    }

    fn apply_effects(&mut self, record_index: usize) {
        let rec = &self.durable.log[record_index];
        for (ei, e) in rec.effects.iter().enumerate() {
            self.effects_by_object
                .entry(e.target.clone())
                .or_default()
                .push(EffectRef { record: record_index, effect: ei });
            self.current
                .entry(e.target.clone())
                .or_insert_with(|| CrdtState::new(e.target.kind))
                .apply(e)
                .expect("effects were prepared against a state of the same kind");
            self.stats.effect_applications += 1;
            if !self.applied_tags.insert(e.tag) {
                self.stats.duplicate_applications += 1;
                self.stats.duplicate_tags.push(e.tag);
            }
        }
    }

    fn append(&mut self, record: CommitRecord) -> usize {
        let idx = self.durable.log.len();
        self.by_otid.insert(record.otid, idx);
        self.durable.log.push(record);
        self.apply_effects(idx);
        idx
    }

    fn bump_max_otid(&mut self, otid: Otid) {
        let e = self.durable.max_otid.entry(otid.origin).or_insert(0);
        *e = (*e).max(otid.counter);
    }

    /// GTID of the newest logged record of `scout`, if it is still in the log.
    fn session_predecessor(&self, scout: ScoutId) -> Option<Gtid> {
        let last = self.durable.max_otid.get(&scout)?;
        let idx = self.by_otid.get(&Otid::new(*last, scout))?;
        self.durable.log[*idx].primary_gtid()
    }

    /// Sequences a transaction submitted by a scout.
    ///
    /// The DC logs the record before making it visible by advancing its own
    /// `vdc` entry. A submission whose OTID is not above the scout's
    /// highest-seen counter is a retry and is answered from the log.
    pub fn global_commit(&mut self, req: &CommitRequest) -> Result<CommitStatus, DcError> {
        if !req.deps.dc.leq(&self.durable.vdc)? {
            return Ok(CommitStatus::Waiting);
        }
        let scout = req.otid.origin;
        if self.cfg.dedup && req.otid.counter <= self.max_otid(scout) {
            let outcome = match self.by_otid.get(&req.otid) {
                Some(idx) => CommitOutcome::ExistingGtid(
                    self.durable.log[*idx].primary_gtid().expect("logged records carry a GTID"),
                ),
                None => CommitOutcome::NullGtid,
            };
            self.events.push(DcEvent::GlobalCommit { otid: req.otid, outcome, deps: req.deps.clone() });
            return Ok(CommitStatus::Done(outcome));
        }
        let id = self.cfg.id;
        let gtid = Gtid::new(self.durable.vdc.get(id) + 1, id);
        // The scout's previous transaction may be visible to it only through
        // its local entry; make the dependency explicit so that every replica
        // applies the two in order.
        let mut deps = req.deps.clone();
        if let Some(prev) = self.session_predecessor(scout) {
            deps.dc.include(prev);
        }
        let record = CommitRecord { otid: req.otid, gtids: vec![gtid], deps: deps.clone(), effects: req.effects.clone() };
        self.append(record);
        self.durable.vdc.set(id, gtid.counter);
        self.known[id.index()] = self.durable.vdc.clone();
        self.bump_max_otid(req.otid);
        let outcome = CommitOutcome::NewGtid(gtid);
        self.events.push(DcEvent::GlobalCommit { otid: req.otid, outcome, deps });
        self.drain_pending_remote();
        Ok(CommitStatus::Done(outcome))
    }

    /// Accepts a record propagated from another DC. Each of its GTIDs is an
    /// independent delivery; a delivery is processed once every earlier GTID
    /// from the same origin and every dependency has been processed.
    pub fn remote_commit(&mut self, record: CommitRecord) -> RemoteOutcome {
        let mut queued = false;
        for g in &record.gtids {
            if g.origin == self.cfg.id || self.durable.vdc.includes(*g) {
                continue;
            }
            self.pending_remote.insert(*g, record.clone());
            queued = true;
        }
        if !queued {
            return RemoteOutcome::Duplicate;
        }
        let before = self.durable.vdc.clone();
        self.drain_pending_remote();
        self.stats.max_pending_remote = self.stats.max_pending_remote.max(self.pending_remote.len());
        let applied_any = record.gtids.iter().any(|g| !before.includes(*g) && self.durable.vdc.includes(*g));
        if !applied_any {
            return RemoteOutcome::Deferred;
        }
        match self.by_otid.get(&record.otid) {
            Some(idx) if self.durable.log[*idx].gtids.len() > 1 => RemoteOutcome::AliasRecorded,
            _ => RemoteOutcome::Applied,
        }
    }

    fn drain_pending_remote(&mut self) {
        loop {
            let mut progressed = false;
            for j in 0..self.cfg.num_dcs {
                let origin = DcId(j as u16);
                if origin == self.cfg.id {
                    continue;
                }
                let next = Gtid::new(self.durable.vdc.get(origin) + 1, origin);
                let ready = match self.pending_remote.get(&next) {
                    Some(rec) => rec.deps.dc.leq(&self.durable.vdc).expect("same domain"),
                    None => false,
                };
                if ready {
                    let rec = self.pending_remote.remove(&next).expect("checked above");
                    self.process_remote_unit(rec, next);
                    progressed = true;
                }
            }
            // Drop deliveries overtaken by other paths.
            let vdc = &self.durable.vdc;
            self.pending_remote.retain(|g, _| !vdc.includes(*g));
            if !progressed {
                break;
            }
        }
    }

    fn process_remote_unit(&mut self, rec: CommitRecord, gtid: Gtid) {
        let outcome = if let (true, Some(idx)) = (self.cfg.dedup, self.by_otid.get(&rec.otid).copied()) {
            let logged = &mut self.durable.log[idx];
            if !logged.gtids.contains(&gtid) {
                logged.gtids.push(gtid);
            }
            RemoteOutcome::AliasRecorded
        } else if self.cfg.dedup && rec.otid.counter <= self.max_otid(rec.otid.origin) {
            // Already applied here and folded into the checkpoint.
            RemoteOutcome::Duplicate
        } else {
            self.append(CommitRecord { gtids: vec![gtid], ..rec.clone() });
            self.bump_max_otid(rec.otid);
            RemoteOutcome::Applied
        };
        self.durable.vdc.set(gtid.origin, gtid.counter);
        let id = self.cfg.id;
        self.known[id.index()] = self.durable.vdc.clone();
        self.events.push(DcEvent::RemoteApply { otid: rec.otid, gtid, outcome });
    }

    /// Per peer, the records it is not known to have plus our `vdc`.
    pub fn gossip_tick(&self) -> Vec<(DcId, GossipBatch)> {
        let floor = self.session_floor();
        (0..self.cfg.num_dcs)
            .map(|j| DcId(j as u16))
            .filter(|p| *p != self.cfg.id)
            .map(|p| {
                let known = &self.known[p.index()];
                let records = self
                    .durable
                    .log
                    .iter()
                    .filter(|r| r.gtids.iter().any(|g| !known.includes(*g)))
                    .cloned()
                    .collect();
                (p, GossipBatch { from: self.cfg.id, records, vdc: self.durable.vdc.clone(), session_floor: floor.clone() })
            })
            .collect()
    }

    /// Handles a gossip batch and returns replies unblocked by it.
    pub fn on_gossip(&mut self, batch: GossipBatch) -> Vec<DcOutbound> {
        self.observe_peer_vector(batch.from, &batch.vdc);
        if batch.from != self.cfg.id {
            self.peer_floors[batch.from.index()] = batch.session_floor.clone();
        }
        for rec in batch.records {
            self.remote_commit(rec);
        }
        self.resume_sessions()
    }

    /// State of `obj` at `snapshot`, including `reader`'s own transactions up
    /// to the snapshot's local entry.
    pub fn read_version(&self, obj: &ObjectId, snapshot: &CausalClock, reader: ScoutId) -> Result<CrdtState, DcError> {
        if !self.durable.prune_vector.leq(&snapshot.dc)? {
            return Err(DcError::VersionPruned);
        }
        let mut state = match self.durable.checkpoint.get(obj) {
            Some(s) => s.clone(),
            None => CrdtState::new(obj.kind),
        };
        if let Some(refs) = self.effects_by_object.get(obj) {
            for r in refs {
                let rec = &self.durable.log[r.record];
                if rec.visible_at(snapshot, reader) {
                    state.apply(&rec.effects[r.effect])?;
                }
            }
        }
        Ok(state)
    }

    /// The prefix processed by every DC and covered by every session floor,
    /// ours and the last one each peer gossiped.
    pub fn prune_floor(&self) -> VersionVector {
        let mut floor = self.session_floor();
        for (j, (v, f)) in self.known.iter().zip(&self.peer_floors).enumerate() {
            if j != self.cfg.id.index() {
                floor = floor.meet(v).expect("same domain").meet(f).expect("same domain");
            }
        }
        floor
    }

    /// The meet of `vdc` and the frontiers of the sessions attached here.
    pub fn session_floor(&self) -> VersionVector {
        self.sessions
            .values()
            .fold(self.durable.vdc.clone(), |f, s| f.meet(&s.last_frontier).expect("same domain"))
    }

    /// Discards log records up to [`Self::prune_floor`], folding them into
    /// the checkpoint. Returns the new prune vector.
    pub fn prune(&mut self) -> VersionVector {
        let floor = self.prune_floor();
        self.prune_up_to(&floor)
    }

    /// Like [`Self::prune`] with an explicit bound, which callers use to keep
    /// a grace period for snapshots still held by in-flight transactions.
    pub fn prune_up_to(&mut self, bound: &VersionVector) -> VersionVector {
        let floor = self.prune_floor().meet(bound).expect("same domain");
        let target = self.durable.prune_vector.join(&floor).expect("same domain");
        if target == self.durable.prune_vector {
            return target;
        }
        let log = std::mem::take(&mut self.durable.log);
        let mut kept = Vec::with_capacity(log.len());
        for rec in log {
            if rec.covered_by(&target) {
                for e in &rec.effects {
                    self.durable
                        .checkpoint
                        .entry(e.target.clone())
                        .or_insert_with(|| CrdtState::new(e.target.kind))
                        .apply(e).expect("logged effects match their targets");
                }
            } else {
                kept.push(rec);
            }
        }
        self.durable.log = kept;
        self.durable.prune_vector = target.clone();
        self.rebuild_indexes();
        target
    }

    /// Builds the next notification batch for every session whose view can
    /// advance.
    pub fn notify_scouts(&mut self) -> Vec<SessionMessage<DcReply>> {
        let frontier = self.visible_frontier();
        let scouts: Vec<ScoutId> = self.sessions.keys().copied().collect();
        let mut out = Vec::new();
        for scout in scouts {
            if let Some(batch) = self.notification_for(scout, &frontier) {
                let epoch = self.sessions[&scout].epoch;
                out.push(SessionMessage { scout, epoch, body: DcReply::Notify(batch) });
            }
        }
        out
    }

    fn notification_for(&mut self, scout: ScoutId, frontier: &VersionVector) -> Option<NotifyBatch> {
        let session = self.sessions.get(&scout)?;
        let from = session.last_frontier.clone();
        let acks: Vec<(Otid, Gtid)> = self
            .durable
            .log
            .iter()
            .filter(|r| r.otid.origin == scout && r.otid.counter > session.announced)
            .map(|r| (r.otid, r.primary_gtid().expect("logged records carry a GTID")))
            .collect();
        if *frontier == from && acks.is_empty() {
            return None;
        }
        let gap_pruned = !self.durable.prune_vector.leq(&from).expect("same domain");
        let mut changes: BTreeMap<ObjectId, Option<Vec<EffectOp>>> = BTreeMap::new();
        if gap_pruned {
            for obj in &session.subscriptions {
                changes.insert(obj.clone(), None);
            }
        } else {
            for rec in &self.durable.log {
                if rec.otid.origin == scout || !rec.covered_by(frontier) || rec.covered_by(&from) {
                    continue;
                }
                for e in &rec.effects {
                    if !session.subscriptions.contains(&e.target) {
                        continue;
                    }
                    let slot = changes.entry(e.target.clone()).or_insert_with(|| Some(Vec::new()));
                    if let (Some(list), NotifyMode::Effects) = (slot, self.cfg.notify_mode) {
                        list.push(e.clone());
                    } else {
                        changes.insert(e.target.clone(), None);
                    }
                }
            }
        }
        let session = self.sessions.get_mut(&scout).expect("checked above");
        let mut updates = Vec::with_capacity(changes.len());
        for (object, change) in changes {
            let change = match change {
                Some(effects) => ObjectChange::Effects(effects),
                None => {
                    session.subscriptions.remove(&object);
                    ObjectChange::Invalidate
                }
            };
            updates.push(ObjectUpdate { object, change });
        }
        if let Some((otid, _)) = acks.last() {
            session.announced = otid.counter;
        }
        session.notify_seq += 1;
        session.last_frontier = frontier.clone();
        Some(NotifyBatch { seq: session.notify_seq, from, frontier: frontier.clone(), updates, acks })
    }

    /// Handles one message on a scout session.
    pub fn on_scout_message(&mut self, msg: SessionMessage<ScoutRequest>) -> Vec<DcOutbound> {
        let SessionMessage { scout, epoch, body } = msg;
        if let ScoutRequest::Connect(req) = body {
            return vec![self.connect(scout, epoch, req)];
        }
        match self.sessions.get_mut(&scout) {
            Some(s) if s.epoch == epoch => {
                s.inbox.push_back(body);
                let depth = s.inbox.len();
                self.stats.max_session_queue = self.stats.max_session_queue.max(depth);
            }
            _ => return Vec::new(),
        }
        self.process_session(scout)
    }

    fn connect(&mut self, scout: ScoutId, epoch: u64, req: ConnectRequest) -> DcOutbound {
        let frontier = self.visible_frontier();
        let accepted = !self.cfg.k_gating || req.clock.dc.leq(&frontier).unwrap_or(false);
        self.sessions.remove(&scout);
        if accepted {
            let last_frontier = if self.cfg.k_gating { req.clock.dc.clone() } else { frontier.clone() };
            self.sessions.insert(
                scout,
                Session {
                    epoch,
                    subscriptions: req.subscriptions.into_iter().collect(),
                    last_frontier,
                    notify_seq: 0,
                    announced: self.max_otid(scout),
                    inbox: VecDeque::new(),
                },
            );
        }
        DcOutbound::Scout(SessionMessage {
            scout,
            epoch,
            body: DcReply::Connect(ConnectReply { accepted, frontier }),
        })
    }

    /// Ends a session, for example when its link is cut.
    pub fn drop_session(&mut self, scout: ScoutId) {
        self.sessions.remove(&scout);
    }

    fn resume_sessions(&mut self) -> Vec<DcOutbound> {
        let blocked: Vec<ScoutId> =
            self.sessions.iter().filter(|(_, s)| !s.inbox.is_empty()).map(|(id, _)| *id).collect();
        blocked.into_iter().flat_map(|s| self.process_session(s)).collect()
    }

    /// Processes queued requests of one session in order, stopping at the
    /// first one whose dependencies are not yet satisfied.
    fn process_session(&mut self, scout: ScoutId) -> Vec<DcOutbound> {
        let mut out = Vec::new();
        while let Some(session) = self.sessions.get(&scout) {
            let epoch = session.epoch;
            let Some(head) = session.inbox.front().cloned() else { break };
            let reply = match head {
                ScoutRequest::Connect(_) => unreachable!("connects are handled on arrival"),
                ScoutRequest::Commit(req) => match self.global_commit(&req) {
                    Ok(CommitStatus::Done(outcome)) => Some(DcReply::Commit(CommitReply { otid: req.otid, outcome })),
                    Ok(CommitStatus::Waiting) => break,
                    Err(e) => panic!("commit request with malformed clock: {e}"),
                },
                ScoutRequest::Fetch(req) => Some(DcReply::Fetch(self.fetch(scout, &req))),
                ScoutRequest::Unsubscribe(objs) => {
                    let s = self.sessions.get_mut(&scout).expect("session exists");
                    for o in objs {
                        s.subscriptions.remove(&o);
                    }
                    None
                }
                ScoutRequest::StoredTx(req) => match self.exec_stored_tx(&req) {
                    Ok(None) => break,
                    Ok(Some(result)) => Some(DcReply::StoredTx(StoredTxReply { otid: req.otid, result: Ok(result) })),
                    Err(e) => Some(DcReply::StoredTx(StoredTxReply { otid: req.otid, result: Err(e.to_string()) })),
                },
            };
            self.sessions.get_mut(&scout).expect("session exists").inbox.pop_front();
            if let Some(body) = reply {
                out.push(DcOutbound::Scout(SessionMessage { scout, epoch, body }));
            }
        }
        out
    }

    fn fetch(&mut self, scout: ScoutId, req: &FetchRequest) -> FetchReply {
        let session = self.sessions.get(&scout).expect("fetch arrives on a live session");
        let notify_seq = session.notify_seq;
        let current_clock = CausalClock::new(session.last_frontier.clone(), req.snapshot.local);
        let mut objects = Vec::with_capacity(req.objects.len());
        for obj in &req.objects {
            let state = match self.read_version(obj, &req.snapshot, scout) {
                Ok(s) => s,
                Err(_) => return FetchReply { request_id: req.request_id, result: FetchResult::VersionPruned, notify_seq },
            };
            let current = if current_clock.dc != req.snapshot.dc {
                match self.read_version(obj, &current_clock, scout) {
                    Ok(s) => Some(s),
                    Err(_) => {
                        return FetchReply { request_id: req.request_id, result: FetchResult::VersionPruned, notify_seq }
                    }
                }
            } else {
                None
            };
            objects.push(FetchedObject { object: obj.clone(), state, current });
        }
        if req.subscribe {
            let s = self.sessions.get_mut(&scout).expect("checked above");
            s.subscriptions.extend(req.objects.iter().cloned());
        }
        FetchReply {
            request_id: req.request_id,
            result: FetchResult::States { objects, current_version: current_clock.dc },
            notify_seq,
        }
    }

    /// Runs a registered procedure at the snapshot pinned by the client.
    ///
    /// Returns `Ok(None)` while the snapshot is not yet available here. The
    /// result is stored durably under the OTID, so a retry observes exactly
    /// the same values and commits nothing new.
    pub fn exec_stored_tx(&mut self, req: &StoredTxRequest) -> Result<Option<StoredTxResult>, DcError> {
        if let Some(done) = self.durable.stored_results.get(&req.otid) {
            return Ok(Some(done.clone()));
        }
        if !req.deps.dc.leq(&self.durable.vdc)? {
            return Ok(None);
        }
        let proc_ = *self.procedures.get(&req.name).ok_or_else(|| DcError::UnknownProcedure(req.name.clone()))?;
        let snapshot = req.deps.clone();
        let mut ctx = StoredTxContext {
            dc: self,
            snapshot: snapshot.clone(),
            otid: req.otid,
            copies: BTreeMap::new(),
            effects: Vec::new(),
        };
        let values = proc_(&mut ctx, &req.params)?;
        let effects = ctx.effects;
        let (record, outcome) = if effects.is_empty() {
            (None, None)
        } else {
            let commit = CommitRequest { otid: req.otid, deps: snapshot.clone(), effects };
            let CommitStatus::Done(outcome) = self.global_commit(&commit)? else {
                unreachable!("dependencies were checked above")
            };
            let record = self.by_otid.get(&req.otid).map(|i| self.durable.log[*i].clone());
            (record, Some(outcome))
        };
        let result = StoredTxResult { values, snapshot, record, outcome };
        self.durable.stored_results.insert(req.otid, result.clone());
        Ok(Some(result))
    }
}

/// Read and update access for a stored procedure.
pub struct StoredTxContext<'a> {
    dc: &'a DataCentre,
    snapshot: CausalClock,
    otid: Otid,
    copies: BTreeMap<ObjectId, CrdtState>,
    effects: Vec<EffectOp>,
}

impl StoredTxContext<'_> {
    fn load(&mut self, obj: &ObjectId) -> Result<&mut CrdtState, DcError> {
        if !self.copies.contains_key(obj) {
            let s = self.dc.read_version(obj, &self.snapshot, self.otid.origin)?;
            self.copies.insert(obj.clone(), s);
        }
        Ok(self.copies.get_mut(obj).expect("inserted above"))
    }

    pub fn read(&mut self, obj: &ObjectId) -> Result<CrdtValue, DcError> {
        Ok(self.load(obj)?.value())
    }

    pub fn update(&mut self, obj: &ObjectId, intent: &UpdateIntent) -> Result<(), DcError> {
        let tag = EffectTag::new(self.otid, self.effects.len() as u32);
        let state = self.load(obj)?;
        let effect = state.prepare(obj, intent, tag)?;
        state.apply(&effect)?;
        self.effects.push(effect);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// A peer gossips an empty batch with the given vector as both its
    /// `vdc` and its session floor.
    fn heard(d: &mut DataCentre, from: DcId, v: &VersionVector) {
        d.on_gossip(GossipBatch { from, records: vec![], vdc: v.clone(), session_floor: v.clone() });
    }
    use crate::crdt::{CrdtKind, EffectPayload};

    const C: ScoutId = ScoutId(3);

    fn dc(id: u16) -> DataCentre {
        DataCentre::new(DcConfig::new(DcId(id), 2, 1))
    }

    fn vv(e: &[u64]) -> VersionVector {
        VersionVector::from_entries(e.to_vec())
    }

    fn add(obj: &str, elem: &str, otid: Otid, seq: u32) -> EffectOp {
        EffectOp {
            target: ObjectId::new(obj, CrdtKind::AwSet),
            tag: EffectTag::new(otid, seq),
            payload: EffectPayload::Add { element: elem.into() },
        }
    }

    fn request(counter: u64, scout: ScoutId, deps: CausalClock, effects: Vec<EffectOp>) -> CommitRequest {
        CommitRequest { otid: Otid::new(counter, scout), deps, effects }
    }

    fn done(status: CommitStatus) -> CommitOutcome {
        match status {
            CommitStatus::Done(o) => o,
            CommitStatus::Waiting => panic!("commit unexpectedly waiting"),
        }
    }

    /// DC0 after T1 (A and B become friends) from scout A.
    fn after_t1() -> DataCentre {
        let mut d = dc(0);
        let t1 = Otid::new(1, ScoutId(1));
        let req = CommitRequest {
            otid: t1,
            deps: CausalClock::zero(2),
            effects: vec![add("B.frd", "A", t1, 0), add("A.frd", "B", t1, 1)],
        };
        assert_eq!(done(d.global_commit(&req).unwrap()), CommitOutcome::NewGtid(Gtid::new(1, DcId(0))));
        d
    }

    #[test]
    fn running_example_commit_assigns_next_gtid() {
        let mut d = after_t1();
        let t3 = Otid::new(1, C);
        let req = request(1, C, CausalClock::zero(2), vec![add("B.frd", "C", t3, 0), add("C.frd", "B", t3, 1)]);
        assert_eq!(done(d.global_commit(&req).unwrap()), CommitOutcome::NewGtid(Gtid::new(2, DcId(0))));
        assert_eq!(d.vdc(), &vv(&[2, 0]));
        assert_eq!(d.max_otid(C), 1);
    }

    #[test]
    fn resubmission_returns_existing_gtid_without_reapplying() {
        let mut d = after_t1();
        let t3 = Otid::new(1, C);
        let req = request(1, C, CausalClock::zero(2), vec![add("B.frd", "C", t3, 0)]);
        d.global_commit(&req).unwrap();
        assert_eq!(done(d.global_commit(&req).unwrap()), CommitOutcome::ExistingGtid(Gtid::new(2, DcId(0))));
        assert_eq!(d.vdc(), &vv(&[2, 0]));
        assert_eq!(d.stats().duplicate_applications, 0);
    }

    #[test]
    fn resubmission_after_prune_returns_null_gtid() {
        let mut d = after_t1();
        let t3 = Otid::new(1, C);
        let req = request(1, C, CausalClock::zero(2), vec![add("B.frd", "C", t3, 0)]);
        d.global_commit(&req).unwrap();
        heard(&mut d, DcId(1), &vv(&[2, 0]));
        assert_eq!(d.prune(), vv(&[2, 0]));
        assert!(d.log().is_empty());
        assert_eq!(done(d.global_commit(&req).unwrap()), CommitOutcome::NullGtid);
    }

    #[test]
    fn commit_waits_for_dependencies() {
        let mut d = dc(0);
        let req = request(1, C, CausalClock::new(vv(&[0, 1]), 0), vec![]);
        assert_eq!(d.global_commit(&req).unwrap(), CommitStatus::Waiting);
    }

    #[test]
    fn disabled_dedup_commits_a_retry_twice() {
        let mut cfg = DcConfig::new(DcId(0), 2, 1);
        cfg.dedup = false;
        let mut d = DataCentre::new(cfg);
        let t = Otid::new(1, C);
        let req = request(1, C, CausalClock::zero(2), vec![add("s", "x", t, 0)]);
        d.global_commit(&req).unwrap();
        assert_eq!(done(d.global_commit(&req).unwrap()), CommitOutcome::NewGtid(Gtid::new(2, DcId(0))));
        assert_eq!(d.stats().duplicate_applications, 1);
    }

    #[test]
    fn remote_replay_of_running_example_converges() {
        let mut d0 = after_t1();
        let t3 = Otid::new(1, C);
        let req = request(1, C, CausalClock::zero(2), vec![add("B.frd", "C", t3, 0)]);
        d0.global_commit(&req).unwrap();
        let mut d1 = dc(1);
        // Deliver in reverse: T3's record first is deferred behind GTID(1,DC0).
        let log = d0.log().to_vec();
        assert_eq!(d1.remote_commit(log[1].clone()), RemoteOutcome::Deferred);
        assert_eq!(d1.vdc(), &vv(&[0, 0]));
        assert_eq!(d1.remote_commit(log[0].clone()), RemoteOutcome::Applied);
        assert_eq!(d1.vdc(), &vv(&[2, 0]));
        assert_eq!(d1.materialized(), d0.materialized());
    }

    #[test]
    fn remote_record_with_unmet_dependencies_is_deferred() {
        let mut d1 = dc(1);
        for c in 1..=3 {
            let o = Otid::new(c, ScoutId(9));
            let rec = CommitRecord { otid: o, gtids: vec![Gtid::new(c, DcId(0))], deps: CausalClock::zero(2), effects: vec![] };
            d1.remote_commit(rec);
        }
        assert_eq!(d1.vdc(), &vv(&[3, 0]));
        let waiting = CommitRecord {
            otid: Otid::new(1, C),
            gtids: vec![Gtid::new(1, DcId(1))],
            deps: CausalClock::new(vv(&[5, 0]), 0),
            effects: vec![],
        };
        let mut d0 = dc(0);
        for c in 1..=3 {
            let rec = CommitRecord {
                otid: Otid::new(c, ScoutId(9)),
                gtids: vec![Gtid::new(c, DcId(0))],
                deps: CausalClock::zero(2),
                effects: vec![],
            };
            d0.global_commit(&CommitRequest { otid: rec.otid, deps: rec.deps, effects: rec.effects }).unwrap();
        }
        assert_eq!(d0.remote_commit(waiting), RemoteOutcome::Deferred);
        assert_eq!(d0.vdc(), &vv(&[3, 0]));
        for c in 4..=5 {
            let req = request(c, ScoutId(9), CausalClock::zero(2), vec![]);
            d0.global_commit(&req).unwrap();
        }
        assert_eq!(d0.vdc(), &vv(&[5, 1]));
    }

    #[test]
    fn alias_is_recorded_and_store_unchanged() {
        let mut d0 = after_t1();
        let t3 = Otid::new(1, C);
        d0.global_commit(&request(1, C, CausalClock::zero(2), vec![add("B.frd", "C", t3, 0)])).unwrap();
        let before = d0.materialized().clone();
        let mut d1 = dc(1);
        let t9 = Otid::new(1, ScoutId(9));
        for c in 1..=3 {
            let req = request(c, ScoutId(9), CausalClock::zero(2), vec![add("z", "z", Otid::new(c, ScoutId(9)), 0)]);
            d1.global_commit(&req).unwrap();
        }
        let _ = t9;
        let alias = CommitRecord {
            otid: t3,
            gtids: vec![Gtid::new(4, DcId(1))],
            deps: CausalClock::zero(2),
            effects: vec![add("B.frd", "C", t3, 0)],
        };
        for rec in d1.log().iter().take(3) {
            d0.remote_commit(rec.clone());
        }
        let z_state = d0.materialized().clone();
        assert_eq!(d0.remote_commit(alias), RemoteOutcome::AliasRecorded);
        assert_eq!(d0.vdc(), &vv(&[2, 4]));
        assert_eq!(d0.materialized(), &z_state);
        assert_eq!(before.get(&ObjectId::new("B.frd", CrdtKind::AwSet)), z_state.get(&ObjectId::new("B.frd", CrdtKind::AwSet)));
        let rec = d0.log().iter().find(|r| r.otid == t3).unwrap();
        assert_eq!(rec.gtids, vec![Gtid::new(2, DcId(0)), Gtid::new(4, DcId(1))]);
        assert_eq!(d0.stats().duplicate_applications, 0);
    }

    #[test]
    fn gossip_sends_the_suffix_the_peer_lacks() {
        let mut d = dc(0);
        for c in 1..=3 {
            d.global_commit(&request(c, C, CausalClock::zero(2), vec![])).unwrap();
        }
        heard(&mut d, DcId(1), &vv(&[1, 0]));
        let batches = d.gossip_tick();
        assert_eq!(batches.len(), 1);
        let (to, batch) = &batches[0];
        assert_eq!(*to, DcId(1));
        let gtids: Vec<Gtid> = batch.records.iter().map(|r| r.gtids[0]).collect();
        assert_eq!(gtids, vec![Gtid::new(2, DcId(0)), Gtid::new(3, DcId(0))]);
        assert_eq!(batch.vdc, vv(&[3, 0]));
        heard(&mut d, DcId(1), &vv(&[3, 0]));
        assert!(d.gossip_tick()[0].1.records.is_empty());
    }

    #[test]
    fn k_durable_frontier_takes_kth_largest() {
        let mut d = DataCentre::new(DcConfig::new(DcId(0), 3, 2));
        for c in 1..=3 {
            d.global_commit(&request(c, C, CausalClock::zero(3), vec![])).unwrap();
        }
        let rec = |c| CommitRecord {
            otid: Otid::new(c, ScoutId(8)),
            gtids: vec![Gtid::new(c, DcId(1))],
            deps: CausalClock::zero(3),
            effects: vec![],
        };
        d.remote_commit(rec(1));
        assert_eq!(d.vdc(), &VersionVector::from_entries(vec![3, 1, 0]));
        heard(&mut d, DcId(1), &VersionVector::from_entries(vec![2, 2, 0]));
        heard(&mut d, DcId(2), &VersionVector::from_entries(vec![2, 0, 0]));
        assert_eq!(d.k_durable_frontier(2).unwrap(), VersionVector::from_entries(vec![2, 1, 0]));
        assert_eq!(d.k_durable_frontier(1).unwrap(), VersionVector::from_entries(vec![3, 2, 0]));
        assert_eq!(d.visible_frontier(), VersionVector::from_entries(vec![2, 1, 0]));
    }

    #[test]
    fn single_dc_frontier_is_own_vector() {
        let mut d = DataCentre::new(DcConfig::new(DcId(0), 1, 1));
        d.global_commit(&request(1, C, CausalClock::zero(1), vec![])).unwrap();
        assert_eq!(d.k_durable_frontier(1).unwrap(), VersionVector::from_entries(vec![1]));
    }

    #[test]
    fn read_version_selects_by_snapshot() {
        let d = after_t1();
        let b = ObjectId::new("B.frd", CrdtKind::AwSet);
        let at0 = d.read_version(&b, &CausalClock::zero(2), C).unwrap();
        assert_eq!(at0.value(), CrdtValue::Set(BTreeSet::new()));
        let at1 = d.read_version(&b, &CausalClock::new(vv(&[1, 0]), 0), C).unwrap();
        assert_eq!(at1.value(), CrdtValue::Set(["A".to_string()].into()));
    }

    #[test]
    fn read_version_includes_own_transactions_by_local_entry() {
        let mut d = dc(0);
        let t = Otid::new(1, C);
        d.global_commit(&request(1, C, CausalClock::zero(2), vec![add("s", "mine", t, 0)])).unwrap();
        let s = ObjectId::new("s", CrdtKind::AwSet);
        let own = d.read_version(&s, &CausalClock::new(vv(&[0, 0]), 1), C).unwrap();
        assert_eq!(own.value(), CrdtValue::Set(["mine".to_string()].into()));
        let other = d.read_version(&s, &CausalClock::new(vv(&[0, 0]), 1), ScoutId(1)).unwrap();
        assert_eq!(other.value(), CrdtValue::Set(BTreeSet::new()));
    }

    #[test]
    fn reads_below_prune_vector_fail() {
        let mut d = after_t1();
        heard(&mut d, DcId(1), &vv(&[1, 0]));
        assert_eq!(d.prune(), vv(&[1, 0]));
        let b = ObjectId::new("B.frd", CrdtKind::AwSet);
        assert_eq!(d.read_version(&b, &CausalClock::zero(2), C), Err(DcError::VersionPruned));
        let at1 = d.read_version(&b, &CausalClock::new(vv(&[1, 0]), 0), C).unwrap();
        assert_eq!(at1.value(), CrdtValue::Set(["A".to_string()].into()));
    }

    #[test]
    fn peer_session_floor_bounds_pruning() {
        let mut d = after_t1();
        d.on_gossip(GossipBatch { from: DcId(1), records: vec![], vdc: vv(&[1, 0]), session_floor: vv(&[0, 0]) });
        assert_eq!(d.prune(), vv(&[0, 0]));
        heard(&mut d, DcId(1), &vv(&[1, 0]));
        assert_eq!(d.prune(), vv(&[1, 0]));
    }

    #[test]
    fn prune_takes_minimum_over_all_vectors() {
        let mut d = DataCentre::new(DcConfig::new(DcId(0), 3, 2));
        for c in 1..=3 {
            d.global_commit(&request(c, C, CausalClock::zero(3), vec![])).unwrap();
        }
        assert_eq!(d.prune(), VersionVector::zero(3));
        for c in 1..=2 {
            d.remote_commit(CommitRecord {
                otid: Otid::new(c, ScoutId(8)),
                gtids: vec![Gtid::new(c, DcId(1))],
                deps: CausalClock::zero(3),
                effects: vec![],
            });
        }
        heard(&mut d, DcId(1), &VersionVector::from_entries(vec![2, 2, 0]));
        heard(&mut d, DcId(2), &VersionVector::from_entries(vec![3, 1, 0]));
        assert_eq!(d.prune(), VersionVector::from_entries(vec![2, 1, 0]));
        assert_eq!(d.log().len(), 2);
        assert_eq!(d.max_otid(C), 3);
        assert_eq!(
            d.read_version(&ObjectId::new("x", CrdtKind::Counter), &CausalClock::new(VersionVector::from_entries(vec![1, 0, 0]), 0), C),
            Err(DcError::VersionPruned)
        );
    }

    #[test]
    fn crash_keeps_durable_state_and_drops_sessions() {
        let mut d = after_t1();
        let connect = SessionMessage {
            scout: C,
            epoch: 1,
            body: ScoutRequest::Connect(ConnectRequest { clock: CausalClock::zero(2), subscriptions: vec![] }),
        };
        d.on_scout_message(connect);
        assert!(d.has_session(C));
        heard(&mut d, DcId(1), &vv(&[0, 5]));
        let before = d.materialized().clone();
        d.crash();
        assert!(!d.has_session(C));
        assert_eq!(d.vdc(), &vv(&[1, 0]));
        assert_eq!(d.known_vector(DcId(1)), &vv(&[0, 0]));
        assert_eq!(d.materialized(), &before);
    }

    fn connect(d: &mut DataCentre, scout: ScoutId, clock: CausalClock, subs: Vec<ObjectId>) -> ConnectReply {
        let out = d.on_scout_message(SessionMessage {
            scout,
            epoch: 1,
            body: ScoutRequest::Connect(ConnectRequest { clock, subscriptions: subs }),
        });
        match &out[..] {
            [DcOutbound::Scout(SessionMessage { body: DcReply::Connect(r), .. })] => r.clone(),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn connect_is_rejected_when_frontier_is_behind_the_scout() {
        let mut d = DataCentre::new(DcConfig::new(DcId(0), 3, 1));
        for c in 1..=22 {
            d.global_commit(&request(c, ScoutId(7), CausalClock::zero(3), vec![])).unwrap();
        }
        let clock = CausalClock::new(VersionVector::from_entries(vec![23, 0, 0]), 0);
        let reply = connect(&mut d, C, clock, vec![]);
        assert!(!reply.accepted);
        assert!(!d.has_session(C));
    }

    #[test]
    fn notifications_carry_only_k_durable_updates_of_other_scouts() {
        let mut d = DataCentre::new(DcConfig::new(DcId(0), 2, 2));
        let b = ObjectId::new("B.frd", CrdtKind::AwSet);
        connect(&mut d, C, CausalClock::zero(2), vec![b.clone()]);
        let t = Otid::new(1, ScoutId(1));
        d.global_commit(&request(1, ScoutId(1), CausalClock::zero(2), vec![add("B.frd", "A", t, 0)])).unwrap();
        // Durable at one DC only: withheld.
        assert!(d.notify_scouts().is_empty());
        heard(&mut d, DcId(1), &vv(&[1, 0]));
        let batches = d.notify_scouts();
        let DcReply::Notify(batch) = &batches[0].body else { panic!() };
        assert_eq!(batch.frontier, vv(&[1, 0]));
        assert_eq!(batch.updates.len(), 1);
        assert_eq!(batch.updates[0].object, b);
        assert!(matches!(&batch.updates[0].change, ObjectChange::Effects(e) if e.len() == 1));
    }

    #[test]
    fn own_commits_are_acknowledged_before_they_are_durable() {
        let mut d = DataCentre::new(DcConfig::new(DcId(0), 2, 2));
        connect(&mut d, C, CausalClock::zero(2), vec![]);
        let out = d.on_scout_message(SessionMessage {
            scout: C,
            epoch: 1,
            body: ScoutRequest::Commit(request(1, C, CausalClock::zero(2), vec![])),
        });
        assert_eq!(out.len(), 1);
        let batches = d.notify_scouts();
        let DcReply::Notify(batch) = &batches[0].body else { panic!() };
        assert_eq!(batch.acks, vec![(Otid::new(1, C), Gtid::new(1, DcId(0)))]);
        assert_eq!(batch.frontier, vv(&[0, 0]));
        assert!(batch.updates.is_empty());
    }

    #[test]
    fn unsubscribed_objects_produce_frontier_only_batches() {
        let mut d = dc(0);
        connect(&mut d, C, CausalClock::zero(2), vec![]);
        let t = Otid::new(1, ScoutId(1));
        d.global_commit(&request(1, ScoutId(1), CausalClock::zero(2), vec![add("B.frd", "A", t, 0)])).unwrap();
        let batches = d.notify_scouts();
        let DcReply::Notify(batch) = &batches[0].body else { panic!() };
        assert_eq!(batch.frontier, vv(&[1, 0]));
        assert!(batch.updates.is_empty());
    }

    #[test]
    fn blocked_commit_stalls_later_session_messages() {
        let mut d = dc(0);
        connect(&mut d, C, CausalClock::zero(2), vec![]);
        let blocked = request(1, C, CausalClock::new(vv(&[0, 1]), 0), vec![]);
        let msg = |body| SessionMessage { scout: C, epoch: 1, body };
        assert!(d.on_scout_message(msg(ScoutRequest::Commit(blocked))).is_empty());
        let fetch = FetchRequest { request_id: 1, objects: vec![], snapshot: CausalClock::zero(2), subscribe: false };
        assert!(d.on_scout_message(msg(ScoutRequest::Fetch(fetch))).is_empty());
        let unblock = GossipBatch {
            from: DcId(1),
            records: vec![CommitRecord {
                otid: Otid::new(1, ScoutId(5)),
                gtids: vec![Gtid::new(1, DcId(1))],
                deps: CausalClock::zero(2),
                effects: vec![],
            }],
            vdc: vv(&[0, 1]),
            session_floor: vv(&[0, 1]),
        };
        let out = d.on_gossip(unblock);
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn messages_from_a_stale_epoch_are_ignored() {
        let mut d = dc(0);
        connect(&mut d, C, CausalClock::zero(2), vec![]);
        let out = d.on_scout_message(SessionMessage {
            scout: C,
            epoch: 0,
            body: ScoutRequest::Commit(request(1, C, CausalClock::zero(2), vec![])),
        });
        assert!(out.is_empty());
        assert_eq!(d.vdc(), &vv(&[0, 0]));
    }

    fn read_counter(ctx: &mut StoredTxContext<'_>, params: &[String]) -> Result<Vec<CrdtValue>, DcError> {
        params.iter().map(|k| ctx.read(&ObjectId::new(k.as_str(), CrdtKind::Counter))).collect()
    }

    fn bump_all(ctx: &mut StoredTxContext<'_>, params: &[String]) -> Result<Vec<CrdtValue>, DcError> {
        for k in params {
            ctx.update(&ObjectId::new(k.as_str(), CrdtKind::Counter), &UpdateIntent::Increment(1))?;
        }
        read_counter(ctx, params)
    }

    #[test]
    fn stored_read_only_procedure_returns_values() {
        let mut d = dc(0);
        let t = Otid::new(1, ScoutId(1));
        let seven = EffectOp {
            target: ObjectId::new("c", CrdtKind::Counter),
            tag: EffectTag::new(t, 0),
            payload: EffectPayload::Increment(7),
        };
        d.global_commit(&request(1, ScoutId(1), CausalClock::zero(2), vec![seven])).unwrap();
        d.register_procedure("read", read_counter);
        let req = StoredTxRequest {
            name: "read".into(),
            params: vec!["c".into()],
            otid: Otid::new(1, C),
            deps: CausalClock::new(vv(&[1, 0]), 0),
        };
        let res = d.exec_stored_tx(&req).unwrap().unwrap();
        assert_eq!(res.values, vec![CrdtValue::Counter(7)]);
        assert!(res.record.is_none());
    }

    #[test]
    fn stored_update_procedure_retried_applies_once() {
        let mut d = dc(0);
        d.register_procedure("bump", bump_all);
        let keys: Vec<String> = (0..100).map(|i| format!("k{i}")).collect();
        let req = StoredTxRequest { name: "bump".into(), params: keys, otid: Otid::new(1, C), deps: CausalClock::zero(2) };
        let first = d.exec_stored_tx(&req).unwrap().unwrap();
        assert_eq!(first.outcome, Some(CommitOutcome::NewGtid(Gtid::new(1, DcId(0)))));
        assert_eq!(first.values[0], CrdtValue::Counter(1));
        let again = d.exec_stored_tx(&req).unwrap().unwrap();
        assert_eq!(again, first);
        assert_eq!(d.vdc(), &vv(&[1, 0]));
        assert_eq!(d.materialized()[&ObjectId::new("k5", CrdtKind::Counter)].value(), CrdtValue::Counter(1));
        // A crash keeps the stored result.
        d.crash();
        assert_eq!(d.exec_stored_tx(&req).unwrap().unwrap(), first);
    }

    #[test]
    fn unknown_procedure_is_an_error() {
        let mut d = dc(0);
        let req = StoredTxRequest { name: "nope".into(), params: vec![], otid: Otid::new(1, C), deps: CausalClock::zero(2) };
        assert_eq!(d.exec_stored_tx(&req), Err(DcError::UnknownProcedure("nope".into())));
    }

    #[test]
    fn commit_after_failover_depends_on_session_predecessor() {
        let mut d = dc(1);
        d.global_commit(&request(1, C, CausalClock::zero(2), vec![])).unwrap();
        d.global_commit(&request(2, C, CausalClock::zero(2), vec![])).unwrap();
        assert_eq!(d.log()[1].deps.dc, vv(&[0, 1]));
    }
}
