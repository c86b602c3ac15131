//! Offline trace checker.
//!
//! Rebuilds the set of committed transactions from a trace and checks every
//! read against a reference computed from first principles: the value an
//! object must have given exactly the transactions visible in the reader's
//! snapshot. On top of that it checks the session guarantees, exactly-once
//! delivery, convergence at quiescence, and reports staleness, latency and
//! liveness metrics.

use std::collections::{BTreeMap, BTreeSet};

use causeway_core::clocks::{CausalClock, DcId, Gtid, Otid, ScoutId, VersionVector};
use causeway_core::crdt::{CrdtKind, CrdtState, CrdtValue, EffectOp, ObjectId};
use causeway_core::dc::RemoteOutcome;
use causeway_core::wire::CommitOutcome;
use serde::{Deserialize, Serialize};

use crate::scenario::{Endpoint, Fault, Link};
use crate::trace::{Event, Trace, TxOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckKind {
    Causal,
    Atomicity,
    MonotonicReads,
    ReadYourWrites,
    WritesFollowReads,
    ExactlyOnce,
    Convergence,
}

impl CheckKind {
    pub const ALL: [CheckKind; 7] = [
        CheckKind::Causal,
        CheckKind::Atomicity,
        CheckKind::MonotonicReads,
        CheckKind::ReadYourWrites,
        CheckKind::WritesFollowReads,
        CheckKind::ExactlyOnce,
        CheckKind::Convergence,
    ];

    /// The session guarantees.
    pub const SESSION: [CheckKind; 3] =
        [CheckKind::MonotonicReads, CheckKind::ReadYourWrites, CheckKind::WritesFollowReads];
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub check: CheckKind,
    pub t: u64,
    pub scout: Option<ScoutId>,
    pub otid: Option<Otid>,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "status", content = "reason")]
pub enum Verdict {
    Pass,
    Fail,
    /// The check does not apply to this run, for example convergence while
    /// a DC is still down.
    Skipped(String),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub txs: usize,
    pub committed: usize,
    pub read_only: usize,
    pub aborted: usize,
    /// Over finished, non-aborted transactions outside warm-up.
    pub measured_txs: usize,
    pub zero_rt_fraction: f64,
    pub rt_histogram: BTreeMap<u32, usize>,
    /// Duration in ms at the 50th, 90th and 99th percentile and the maximum.
    pub duration_p50: u64,
    pub duration_p90: u64,
    pub duration_p99: u64,
    pub duration_max: u64,
    #[serde(skip)]
    pub durations: Vec<u64>,
    pub reads: usize,
    pub stale_reads: usize,
    pub stale_read_fraction: f64,
    pub txs_with_reads: usize,
    pub stale_txs: usize,
    pub stale_tx_fraction: f64,
    pub regressions: usize,
    pub messages: u64,
    pub gossip_messages: u64,
    pub dropped_messages: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Liveness {
    pub quiesced: bool,
    /// Scouts that are online but did not finish their script.
    pub blocked_scouts: Vec<ScoutId>,
    /// Up DCs whose visible frontier lags what they have applied.
    pub stalled_dcs: Vec<DcId>,
    /// Sum over up DCs of `vdc - visible`, in transactions.
    pub frontier_lag: u64,
    /// Locally committed transactions not yet at any DC.
    pub pending_commits: usize,
    pub max_pending_remote: usize,
    pub max_session_queue: usize,
}

impl Liveness {
    pub fn degraded(&self) -> bool {
        !self.quiesced || !self.blocked_scouts.is_empty() || !self.stalled_dcs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub verdicts: BTreeMap<CheckKind, Verdict>,
    pub violations: Vec<Violation>,
    pub metrics: Metrics,
    pub liveness: Liveness,
}

impl CheckReport {
    pub fn verdict(&self, check: CheckKind) -> &Verdict {
        &self.verdicts[&check]
    }

    pub fn failed(&self, check: CheckKind) -> bool {
        self.verdicts[&check] == Verdict::Fail
    }

    pub fn passed(&self, check: CheckKind) -> bool {
        self.verdicts[&check] == Verdict::Pass
    }

    /// No check failed. Skipped checks do not count against a run.
    pub fn safe(&self) -> bool {
        self.verdicts.values().all(|v| *v != Verdict::Fail)
    }

    pub fn count(&self, check: CheckKind) -> usize {
        self.violations.iter().filter(|v| v.check == check).count()
    }
}

/// A transaction with updates, as reconstructed from the trace.
#[derive(Debug, Clone, Default)]
struct Rec {
    effects: Vec<EffectOp>,
    /// Effects came from a DC log rather than the client's view.
    effects_from_dc: bool,
    snapshot: Option<CausalClock>,
    local_commit: bool,
    gtids: BTreeSet<Gtid>,
    deps_by_gtid: BTreeMap<Gtid, CausalClock>,
    null: bool,
    first_commit: Option<u64>,
    /// First time each DC applied it.
    seen: BTreeMap<DcId, u64>,
    applications: BTreeMap<DcId, u32>,
}

impl Rec {
    fn delivered(&self) -> bool {
        self.first_commit.is_some()
    }

    fn objects(&self) -> BTreeSet<&ObjectId> {
        self.effects.iter().map(|e| &e.target).collect()
    }

    /// When the K-th DC applied it.
    fn k_durable_at(&self, k: usize) -> Option<u64> {
        let mut times: Vec<u64> = self.seen.values().copied().collect();
        times.sort_unstable();
        times.get(k.saturating_sub(1)).copied()
    }
}

#[derive(Debug, Clone)]
struct ReadObs {
    object: ObjectId,
    value: CrdtValue,
    served_at: u64,
    t: u64,
    /// Own effects on the object buffered before the read.
    own: Vec<EffectOp>,
}

#[derive(Debug, Clone)]
struct TxObs {
    scout: ScoutId,
    otid: Otid,
    snapshot: CausalClock,
    warmup: bool,
    stored: bool,
    t: u64,
    reads: Vec<ReadObs>,
    effects: Vec<EffectOp>,
    end: Option<(TxOutcome, u32, u64)>,
}

struct View<'a> {
    reader: ScoutId,
    clock: &'a CausalClock,
}

impl View<'_> {
    fn sees(&self, otid: Otid, rec: &Rec) -> bool {
        (otid.origin == self.reader && rec.local_commit && otid.counter <= self.clock.local)
            || rec.gtids.iter().any(|g| self.clock.dc.includes(*g))
    }
}

struct Checker<'a> {
    trace: &'a Trace,
    initial: BTreeMap<ObjectId, CrdtState>,
    recs: BTreeMap<Otid, Rec>,
    by_object: BTreeMap<ObjectId, Vec<Otid>>,
    by_gtid: BTreeMap<Gtid, Otid>,
    txs: Vec<TxObs>,
    violations: Vec<Violation>,
}

pub fn check(trace: &Trace) -> CheckReport {
    let mut c = Checker {
        trace,
        initial: BTreeMap::new(),
        recs: BTreeMap::new(),
        by_object: BTreeMap::new(),
        by_gtid: BTreeMap::new(),
        txs: Vec::new(),
        violations: Vec::new(),
    };
    c.collect();
    c.check_well_formed();
    c.check_reads();
    c.check_sessions();
    c.check_writes_follow_reads();
    let (quiesced, end) = c.end_state();
    let mut verdicts = BTreeMap::new();
    let exactly_once = c.check_exactly_once(&end);
    let convergence = c.check_convergence(&end);
    for k in CheckKind::ALL {
        let failed = c.violations.iter().any(|v| v.check == k);
        let v = match k {
            CheckKind::ExactlyOnce => exactly_once.clone(),
            CheckKind::Convergence => convergence.clone(),
            _ => None,
        };
        let verdict = match (failed, v) {
            (true, _) => Verdict::Fail,
            (false, Some(reason)) => Verdict::Skipped(reason),
            (false, None) => Verdict::Pass,
        };
        verdicts.insert(k, verdict);
    }
    let metrics = c.metrics(&end);
    let liveness = c.liveness(&end, quiesced);
    c.violations.sort_by_key(|v| (v.t, v.check));
    CheckReport { verdicts, violations: c.violations, metrics, liveness }
}

/// Final state of the run, taken from the closing events.
#[derive(Default)]
struct EndState {
    quiesced: bool,
    dcs: Vec<FinalDcState>,
    scouts: Vec<FinalScoutState>,
    partitioned: BTreeSet<Link>,
    messages: (u64, u64, u64),
}

struct FinalDcState {
    dc: DcId,
    up: bool,
    vdc: VersionVector,
    visible: VersionVector,
    objects: BTreeMap<ObjectId, CrdtState>,
    max_pending_remote: usize,
    max_session_queue: usize,
}

struct FinalScoutState {
    scout: ScoutId,
    clock: CausalClock,
    offline: bool,
    pending: usize,
    finished: bool,
}

fn apply_all<'e>(state: &mut CrdtState, effects: impl IntoIterator<Item = &'e EffectOp>) {
    for e in effects {
        state.apply(e).expect("trace effects match their objects");
    }
}

impl Checker<'_> {
    fn violation(&mut self, check: CheckKind, t: u64, scout: Option<ScoutId>, otid: Option<Otid>, detail: String) {
        self.violations.push(Violation { check, t, scout, otid, detail });
    }

    fn initial_state(&self, obj: &ObjectId) -> CrdtState {
        self.initial.get(obj).cloned().unwrap_or_else(|| CrdtState::new(obj.kind))
    }

    fn collect(&mut self) {
        let mut open: BTreeMap<Otid, usize> = BTreeMap::new();
        for (t, ev) in self.trace.events() {
            match ev {
                Event::Initial { objects } => self.initial = objects.iter().cloned().collect(),
                Event::TxBegin { scout, otid, snapshot, .. } => {
                    let warmup = matches!(ev, Event::TxBegin { warmup: true, .. });
                    open.insert(*otid, self.txs.len());
                    self.txs.push(TxObs {
                        scout: *scout,
                        otid: *otid,
                        snapshot: snapshot.clone(),
                        warmup,
                        stored: false,
                        t,
                        reads: Vec::new(),
                        effects: Vec::new(),
                        end: None,
                    });
                }
                Event::Read { otid, object, value, served_at, .. } => {
                    let tx = &mut self.txs[open[otid]];
                    let own = tx.effects.iter().filter(|e| e.target == *object).cloned().collect();
                    tx.reads.push(ReadObs { object: object.clone(), value: value.clone(), served_at: *served_at, t, own });
                }
                Event::Update { otid, effect, .. } => self.txs[open[otid]].effects.push(effect.clone()),
                Event::LocalCommit { otid, snapshot, effects, .. } => {
                    let rec = self.recs.entry(*otid).or_default();
                    rec.local_commit = true;
                    rec.snapshot = Some(snapshot.clone());
                    if !rec.effects_from_dc {
                        rec.effects = effects.clone();
                    }
                }
                Event::StoredTx { otid, deps, result, .. } => {
                    if let Some(i) = open.get(otid) {
                        self.txs[*i].stored = true;
                    }
                    if let Ok(res) = result {
                        if let Some(record) = &res.record {
                            let rec = self.recs.entry(*otid).or_default();
                            rec.local_commit = true;
                            rec.snapshot = Some(deps.clone());
                            if !rec.effects_from_dc {
                                rec.effects = record.effects.clone();
                            }
                        }
                    }
                }
                Event::TxEnd { otid, outcome, round_trips, started, .. } => {
                    if let Some(i) = open.remove(otid) {
                        self.txs[i].end = Some((outcome.clone(), *round_trips, t - started));
                    }
                }
                Event::GlobalCommit { dc, otid, outcome, deps, effects } => {
                    let rec = self.recs.entry(*otid).or_default();
                    match outcome {
                        CommitOutcome::NewGtid(g) => {
                            rec.gtids.insert(*g);
                            rec.deps_by_gtid.insert(*g, deps.clone());
                            rec.first_commit.get_or_insert(t);
                            rec.seen.entry(*dc).or_insert(t);
                            *rec.applications.entry(*dc).or_default() += 1;
                            if !rec.effects_from_dc {
                                rec.effects = effects.clone();
                                rec.effects_from_dc = true;
                            }
                        }
                        CommitOutcome::ExistingGtid(g) => {
                            rec.gtids.insert(*g);
                        }
                        CommitOutcome::NullGtid => rec.null = true,
                    }
                }
                Event::RemoteApply { dc, otid, gtid, outcome } => {
                    let rec = self.recs.entry(*otid).or_default();
                    rec.gtids.insert(*gtid);
                    match outcome {
                        RemoteOutcome::Applied => {
                            rec.seen.entry(*dc).or_insert(t);
                            *rec.applications.entry(*dc).or_default() += 1;
                        }
                        RemoteOutcome::AliasRecorded => {
                            rec.seen.entry(*dc).or_insert(t);
                        }
                        RemoteOutcome::Deferred | RemoteOutcome::Duplicate => {}
                    }
                }
                _ => {}
            }
        }
        for (otid, rec) in &self.recs {
            for obj in rec.objects() {
                self.by_object.entry(obj.clone()).or_default().push(*otid);
            }
            for g in &rec.gtids {
                self.by_gtid.insert(*g, *otid);
            }
        }
    }

    /// Every dependency of a record was assigned before the record itself,
    /// so the dependency and program-order graph is acyclic.
    fn check_well_formed(&mut self) {
        let n = self.trace.config.num_dcs;
        let mut assigned = VersionVector::zero(n);
        let mut found = Vec::new();
        for (t, ev) in self.trace.events() {
            if let Event::GlobalCommit { otid, outcome: CommitOutcome::NewGtid(g), deps, .. } = ev {
                if !deps.dc.leq(&assigned).unwrap_or(false) {
                    found.push((t, *otid, format!("depends on {} which was not assigned yet ({})", deps.dc, assigned)));
                }
                if g.counter > assigned.get(g.origin) {
                    assigned.set(g.origin, g.counter);
                }
            }
        }
        for (t, otid, detail) in found {
            self.violation(CheckKind::Causal, t, Some(otid.origin), Some(otid), detail);
        }
    }

    /// The value `obj` must have in `view`, with `toggled` flipped in or out.
    fn reference(&self, obj: &ObjectId, view: &View<'_>, own: &[EffectOp], toggled: Option<Otid>) -> CrdtState {
        let mut state = self.initial_state(obj);
        for otid in self.by_object.get(obj).into_iter().flatten() {
            let rec = &self.recs[otid];
            if view.sees(*otid, rec) != (toggled == Some(*otid)) {
                apply_all(&mut state, rec.effects.iter().filter(|e| e.target == *obj));
            }
        }
        apply_all(&mut state, own);
        state
    }

    fn check_reads(&mut self) {
        let mut found = Vec::new();
        for tx in &self.txs {
            if tx.stored || tx.reads.is_empty() {
                continue;
            }
            let view = View { reader: tx.scout, clock: &tx.snapshot };
            if let Some(detail) = self.closure_gap(&view) {
                found.push((CheckKind::Causal, tx.t, tx, detail));
            }
            let read_objects: BTreeSet<&ObjectId> = tx.reads.iter().map(|r| &r.object).collect();
            for r in &tx.reads {
                let expect = self.reference(&r.object, &view, &r.own, None).value();
                if expect == r.value {
                    continue;
                }
                // A transaction whose visibility flips the outcome and that
                // also wrote another object of this read set was observed
                // only partially.
                let partial = self.by_object.get(&r.object).into_iter().flatten().find(|o| {
                    let rec = &self.recs[*o];
                    let objs = rec.objects();
                    objs.len() > 1
                        && objs.iter().any(|x| **x != r.object && read_objects.contains(x))
                        && self.reference(&r.object, &view, &r.own, Some(**o)).value() == r.value
                });
                match partial {
                    Some(o) => found.push((
                        CheckKind::Atomicity,
                        r.t,
                        tx,
                        format!("{} reflects only part of transaction {o}", r.object),
                    )),
                    None => found.push((
                        CheckKind::Causal,
                        r.t,
                        tx,
                        format!("{} read {:?}, snapshot {} implies {:?}", r.object, r.value, tx.snapshot, expect),
                    )),
                }
            }
        }
        let found: Vec<_> = found.into_iter().map(|(k, t, tx, d)| (k, t, tx.scout, tx.otid, d)).collect();
        for (k, t, s, o, d) in found {
            self.violation(k, t, Some(s), Some(o), d);
        }
    }

    /// A visible transaction whose dependency is not visible, or a gap in
    /// some scout's visible transactions.
    fn closure_gap(&self, view: &View<'_>) -> Option<String> {
        let mut visible_by_origin: BTreeMap<ScoutId, Vec<(u64, bool)>> = BTreeMap::new();
        for (otid, rec) in &self.recs {
            if !rec.local_commit && !rec.delivered() {
                continue;
            }
            let sees = view.sees(*otid, rec);
            visible_by_origin.entry(otid.origin).or_default().push((otid.counter, sees));
            if !sees {
                continue;
            }
            // The client snapshot is the true dependency set; DC-side deps
            // over-approximate it with whole vector prefixes.
            if let Some(deps) = &rec.snapshot {
                if deps.dc.leq(&view.clock.dc).unwrap_or(false) {
                    continue;
                }
                for (j, (want, have)) in deps.dc.entries().iter().zip(view.clock.dc.entries()).enumerate() {
                    for c in have + 1..=*want {
                        let Some(o) = self.by_gtid.get(&Gtid::new(c, DcId(j as u16))) else { continue };
                        if !view.sees(*o, &self.recs[o]) {
                            return Some(format!("sees {otid} but not its dependency {o}"));
                        }
                    }
                }
            }
        }
        for (origin, list) in visible_by_origin {
            // Entries are in counter order since the map is keyed by OTID.
            if let Some(w) = list.windows(2).find(|w| !w[0].1 && w[1].1) {
                return Some(format!("sees transaction {} of {origin} but not {}", w[1].0, w[0].0));
            }
        }
        None
    }

    fn check_sessions(&mut self) {
        let mut found = Vec::new();
        let mut by_scout: BTreeMap<ScoutId, Vec<&TxObs>> = BTreeMap::new();
        for tx in &self.txs {
            by_scout.entry(tx.scout).or_default().push(tx);
        }
        for (scout, txs) in &by_scout {
            let mut last_write: Option<Otid> = None;
            let mut prev: Option<&TxObs> = None;
            for tx in txs {
                if let Some(w) = last_write {
                    if tx.snapshot.local < w.counter {
                        found.push((CheckKind::ReadYourWrites, tx, format!("snapshot {} misses own {w}", tx.snapshot)));
                    }
                }
                if let Some(p) = prev {
                    if !p.snapshot.leq(&tx.snapshot).unwrap_or(false) {
                        let old = View { reader: *scout, clock: &p.snapshot };
                        let new = View { reader: *scout, clock: &tx.snapshot };
                        let lost = self.recs.iter().find(|(o, r)| old.sees(**o, r) && !new.sees(**o, r));
                        if let Some((o, _)) = lost {
                            found.push((
                                CheckKind::MonotonicReads,
                                tx,
                                format!("{o} visible at {} but not at {}", p.snapshot, tx.snapshot),
                            ));
                        }
                    }
                }
                if self.recs.get(&tx.otid).is_some_and(|r| r.local_commit) {
                    last_write = Some(tx.otid);
                }
                prev = Some(tx);
            }
        }
        // Every later read of the session is served from an adopted view, so
        // a regression that hides something an earlier snapshot contained
        // breaks monotonic reads even before another transaction starts.
        let mut regressions = Vec::new();
        for (t, ev) in self.trace.events() {
            let Event::Regression { scout, to, .. } = ev else { continue };
            let Some(p) = by_scout.get(scout).and_then(|txs| txs.iter().rev().find(|tx| tx.t <= t)) else { continue };
            let adopted = CausalClock::new(to.clone(), p.snapshot.local);
            let old = View { reader: *scout, clock: &p.snapshot };
            let new = View { reader: *scout, clock: &adopted };
            if let Some((o, _)) = self.recs.iter().find(|(o, r)| old.sees(**o, r) && !new.sees(**o, r)) {
                regressions.push((t, *scout, format!("{o} visible at {} but the session adopted {to}", p.snapshot)));
            }
        }
        let found: Vec<_> = found.into_iter().map(|(k, tx, d)| (k, tx.t, tx.scout, Some(tx.otid), d)).collect();
        for (k, t, s, o, d) in found {
            self.violation(k, t, Some(s), o, d);
        }
        for (t, s, d) in regressions {
            self.violation(CheckKind::MonotonicReads, t, Some(s), None, d);
        }
    }

    /// A DC applies a transaction only after everything its writer had
    /// observed, and the DC-side dependencies cover the client snapshot.
    fn check_writes_follow_reads(&mut self) {
        let n = self.trace.config.num_dcs;
        let mut applied = vec![VersionVector::zero(n); n];
        let mut found = Vec::new();
        for (t, ev) in self.trace.events() {
            let (dc, otid, gtid) = match ev {
                Event::GlobalCommit { dc, otid, outcome: CommitOutcome::NewGtid(g), deps, .. } => {
                    if let Some(snap) = self.recs.get(otid).and_then(|r| r.snapshot.as_ref()) {
                        if !snap.dc.leq(&deps.dc).unwrap_or(false) {
                            found.push((t, *otid, format!("DC dependencies {} below client snapshot {}", deps.dc, snap.dc)));
                        }
                    }
                    (*dc, *otid, *g)
                }
                Event::RemoteApply { dc, otid, gtid, outcome } if *outcome != RemoteOutcome::Deferred => {
                    (*dc, *otid, *gtid)
                }
                _ => continue,
            };
            let deps = self.recs.get(&otid).and_then(|r| r.deps_by_gtid.get(&gtid));
            if let Some(deps) = deps {
                if !deps.dc.leq(&applied[dc.index()]).unwrap_or(false) {
                    found.push((t, otid, format!("{dc} applied {gtid} at {} before its dependencies {}", applied[dc.index()], deps.dc)));
                }
            }
            let v = &mut applied[dc.index()];
            if gtid.counter > v.get(gtid.origin) {
                v.set(gtid.origin, gtid.counter);
            }
        }
        for (t, otid, d) in found {
            self.violation(CheckKind::WritesFollowReads, t, Some(otid.origin), Some(otid), d);
        }
    }

    fn end_state(&self) -> (bool, EndState) {
        let mut end = EndState::default();
        for (_, ev) in self.trace.events() {
            match ev {
                Event::Fault { fault: Fault::Partition { links } } => end.partitioned.extend(links.iter().copied()),
                Event::Fault { fault: Fault::Heal { links } } => {
                    if links.is_empty() {
                        end.partitioned.clear();
                    }
                    for l in links {
                        end.partitioned.remove(l);
                    }
                }
                Event::FinalDc { dc, up, vdc, visible, objects, stats, .. } => end.dcs.push(FinalDcState {
                    dc: *dc,
                    up: *up,
                    vdc: vdc.clone(),
                    visible: visible.clone(),
                    objects: objects.iter().cloned().collect(),
                    max_pending_remote: stats.max_pending_remote,
                    max_session_queue: stats.max_session_queue,
                }),
                Event::FinalScout { scout, clock, offline, pending, completed, script_len, .. } => {
                    end.scouts.push(FinalScoutState {
                        scout: *scout,
                        clock: clock.clone(),
                        offline: *offline,
                        pending: pending.len(),
                        finished: completed >= script_len,
                    })
                }
                Event::End { quiesced, messages, gossip_messages, dropped_messages } => {
                    end.quiesced = *quiesced;
                    end.messages = (*messages, *gossip_messages, *dropped_messages);
                }
                _ => {}
            }
        }
        (end.quiesced, end)
    }

    /// State of every object after applying `order` once each.
    fn replay<'o>(&self, order: impl IntoIterator<Item = &'o Otid>) -> BTreeMap<ObjectId, CrdtState> {
        let mut out = self.initial.clone();
        for otid in order {
            for e in &self.recs[otid].effects {
                let s = out.entry(e.target.clone()).or_insert_with(|| CrdtState::new(e.target.kind));
                s.apply(e).expect("trace effects match their objects");
            }
        }
        out
    }

    /// Transactions some DC accepted, in order of first acceptance.
    fn delivered(&self) -> Vec<Otid> {
        let mut d: Vec<(u64, Otid)> =
            self.recs.iter().filter_map(|(o, r)| r.first_commit.map(|t| (t, *o))).collect();
        d.sort();
        d.into_iter().map(|(_, o)| o).collect()
    }

    fn check_exactly_once(&mut self, end: &EndState) -> Option<String> {
        let mut found = Vec::new();
        for (otid, rec) in &self.recs {
            for (dc, n) in &rec.applications {
                if *n > 1 {
                    found.push((*otid, format!("{dc} applied {otid} {n} times")));
                }
            }
            if rec.null && !rec.delivered() {
                found.push((*otid, format!("{otid} was reported as already delivered but no DC ever accepted it")));
            }
        }
        let skip = if !end.quiesced { Some("run did not quiesce".to_string()) } else { None };
        if skip.is_none() {
            let offline: BTreeSet<ScoutId> = end.scouts.iter().filter(|s| s.offline).map(|s| s.scout).collect();
            for (otid, rec) in &self.recs {
                if rec.local_commit && !rec.delivered() && !offline.contains(&otid.origin) {
                    found.push((*otid, format!("{otid} committed locally but never reached a DC")));
                }
            }
            let oracle = self.replay(&self.delivered());
            for dc in end.dcs.iter().filter(|d| d.up) {
                if let Some(d) = state_diff(&oracle, &dc.objects, true) {
                    found.push((Otid::new(0, ScoutId(u32::MAX)), format!("{}: {d}", dc.dc)));
                }
            }
        }
        for (otid, d) in found {
            let (scout, otid) = if otid.origin.0 == u32::MAX { (None, None) } else { (Some(otid.origin), Some(otid)) };
            self.violation(CheckKind::ExactlyOnce, self.end_time(), scout, otid, d);
        }
        skip
    }

    fn check_convergence(&mut self, end: &EndState) -> Option<String> {
        if !end.quiesced {
            return Some("run did not quiesce".into());
        }
        if end.dcs.iter().any(|d| !d.up) {
            return Some("a DC is down".into());
        }
        if end.partitioned.iter().any(|l| matches!(l, Link(Endpoint::Dc(_), Endpoint::Dc(_)))) {
            return Some("a DC link is still partitioned".into());
        }
        let mut found = Vec::new();
        let mut order = self.delivered();
        order.reverse();
        let oracle = self.replay(&order);
        for dc in &end.dcs {
            if let Some(d) = state_diff(&oracle, &dc.objects, false) {
                found.push(format!("{} differs from the replay oracle: {d}", dc.dc));
            }
            if let Some(other) = end.dcs.iter().find(|o| o.dc < dc.dc && o.vdc != dc.vdc) {
                found.push(format!("{} and {} applied different transactions", other.dc, dc.dc));
            }
        }
        if let Some(vdc) = end.dcs.first().map(|d| &d.vdc) {
            for s in end.scouts.iter().filter(|s| !s.clock.dc.leq(vdc).unwrap_or(false)) {
                found.push(format!("{} has clock {} beyond the DCs' {}", s.scout, s.clock.dc, vdc));
            }
        }
        for d in found {
            self.violation(CheckKind::Convergence, self.end_time(), None, None, d);
        }
        None
    }

    fn end_time(&self) -> u64 {
        self.trace.records.last().map_or(0, |r| r.t)
    }

    fn metrics(&self, end: &EndState) -> Metrics {
        let mut m = Metrics { regressions: 0, ..Default::default() };
        m.regressions = self.trace.events().filter(|(_, e)| matches!(e, Event::Regression { .. })).count();
        (m.messages, m.gossip_messages, m.dropped_messages) = end.messages;
        let k = self.trace.config.k;
        let mut durations = Vec::new();
        let mut zero = 0;
        for tx in &self.txs {
            let Some((outcome, rts, duration)) = &tx.end else { continue };
            m.txs += 1;
            match outcome {
                TxOutcome::Committed => m.committed += 1,
                TxOutcome::ReadOnly => m.read_only += 1,
                TxOutcome::Aborted(_) => m.aborted += 1,
            }
            if tx.warmup || matches!(outcome, TxOutcome::Aborted(_)) {
                continue;
            }
            m.measured_txs += 1;
            *m.rt_histogram.entry(*rts).or_default() += 1;
            if *rts == 0 {
                zero += 1;
            }
            durations.push(*duration);
            if tx.reads.is_empty() {
                continue;
            }
            m.txs_with_reads += 1;
            let view = View { reader: tx.scout, clock: &tx.snapshot };
            let mut stale_tx = false;
            for r in &tx.reads {
                m.reads += 1;
                let stale = self.by_object.get(&r.object).into_iter().flatten().any(|o| {
                    let rec = &self.recs[o];
                    !view.sees(*o, rec)
                        && rec.first_commit.is_some_and(|c| c <= r.served_at)
                        && rec.k_durable_at(k).is_none_or(|kd| r.served_at < kd)
                });
                if stale {
                    m.stale_reads += 1;
                    stale_tx = true;
                }
            }
            if stale_tx {
                m.stale_txs += 1;
            }
        }
        m.zero_rt_fraction = ratio(zero, m.measured_txs);
        m.stale_read_fraction = ratio(m.stale_reads, m.reads);
        m.stale_tx_fraction = ratio(m.stale_txs, m.txs_with_reads);
        durations.sort_unstable();
        let pct = |p: f64| durations.get(((durations.len() as f64 * p).ceil() as usize).saturating_sub(1)).copied();
        m.duration_p50 = pct(0.5).unwrap_or(0);
        m.duration_p90 = pct(0.9).unwrap_or(0);
        m.duration_p99 = pct(0.99).unwrap_or(0);
        m.duration_max = durations.last().copied().unwrap_or(0);
        m.durations = durations;
        m
    }

    fn liveness(&self, end: &EndState, quiesced: bool) -> Liveness {
        let mut l = Liveness { quiesced, ..Default::default() };
        for s in &end.scouts {
            if !s.offline && !s.finished {
                l.blocked_scouts.push(s.scout);
            }
            l.pending_commits += s.pending;
        }
        for d in &end.dcs {
            l.max_pending_remote = l.max_pending_remote.max(d.max_pending_remote);
            l.max_session_queue = l.max_session_queue.max(d.max_session_queue);
            if !d.up {
                continue;
            }
            let lag: u64 = d.vdc.entries().iter().zip(d.visible.entries()).map(|(a, b)| a.saturating_sub(*b)).sum();
            if lag > 0 {
                l.stalled_dcs.push(d.dc);
                l.frontier_lag += lag;
            }
        }
        l
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// First object whose value differs. Objects missing on one side count as
/// freshly created.
fn state_diff(
    want: &BTreeMap<ObjectId, CrdtState>,
    got: &BTreeMap<ObjectId, CrdtState>,
    counters_only: bool,
) -> Option<String> {
    let keys: BTreeSet<&ObjectId> = want.keys().chain(got.keys()).collect();
    for k in keys {
        if counters_only && k.kind != CrdtKind::Counter && !contains_counter(want.get(k)) {
            continue;
        }
        let value = |m: &BTreeMap<ObjectId, CrdtState>| m.get(k).map_or_else(|| CrdtState::new(k.kind).value(), |s| s.value());
        let (w, g) = (value(want), value(got));
        if w != g {
            return Some(format!("{k} is {g:?}, expected {w:?}"));
        }
    }
    None
}

fn contains_counter(state: Option<&CrdtState>) -> bool {
    match state {
        Some(CrdtState::Cmap { fields }) => fields.iter().any(|(k, v)| k.kind == CrdtKind::Counter || contains_counter(Some(v))),
        _ => false,
    }
}
