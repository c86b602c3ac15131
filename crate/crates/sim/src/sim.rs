//! Discrete-event simulator.
//!
//! Hosts the DCs and scouts of a scenario, drives the scouts through their
//! scripts and delivers messages over a latency model with per-link FIFO
//! order. Everything observable goes to the trace. The only source of
//! randomness is the scenario seed, so a scenario always yields the same
//! trace bytes.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, VecDeque};

use causeway_core::clocks::{DcId, Otid, ScoutId, VersionVector};
use causeway_core::dc::{DataCentre, DcConfig, DcEvent, DcOutbound, DurableState};
use causeway_core::scout::{
    Durability, ReadStep, Scout, ScoutConfig, ScoutError, ScoutEvent, ScoutOutput, SessionState,
};
use causeway_core::wire::{CommitOutcome, DcReply, GossipBatch, ScoutRequest, SessionMessage};
use causeway_core::ObjectId;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::scenario::{ConfigError, Endpoint, Fault, FaultEvent, Link, SessionDc, SimConfig};
use crate::trace::{Event, Record, Trace, TxOutcome};
use crate::workload::{self, ScriptTx, Step, TxBody};

const NET_STREAM: u64 = 0x6e65_7477;

enum Msg {
    ToDc(SessionMessage<ScoutRequest>),
    ToScout(SessionMessage<DcReply>),
    Gossip(GossipBatch),
}

enum Action {
    Deliver { from: Endpoint, to: Endpoint, msg: Box<Msg> },
    GossipTick(usize),
    NotifyTick(usize),
    PruneTick(usize),
    QuiesceCheck,
    Fault(usize),
    Recover(usize),
    Wake(usize),
    Reconnect(usize),
    Detect { scout: usize, epoch: u64 },
    ConnectTimeout { scout: usize, epoch: u64 },
}

struct Scheduled {
    time: u64,
    seq: u64,
    action: Action,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    // Reversed: the heap pops the earliest event, ties in insertion order.
    fn cmp(&self, other: &Self) -> Ordering {
        (other.time, other.seq).cmp(&(self.time, self.seq))
    }
}

struct DcNode {
    dc: DataCentre,
    up: bool,
    /// Armed by a crash-after-commit fault; holds the recovery delay.
    crash_armed: Option<Option<u64>>,
    last_visible: VersionVector,
    /// Floor seen at the previous prune tick; pruning lags one interval.
    prune_bound: VersionVector,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Waiting {
    Nothing,
    Read { request_id: u64, missing: Vec<ObjectId> },
    Stored(Otid),
    /// A stored transaction waiting for a session to be sent on.
    Session,
    Durable(Otid),
}

struct TxRun {
    otid: Option<Otid>,
    started: u64,
    round_trips: u32,
    step: usize,
    waiting: Waiting,
    /// Name and dependencies of a stored transaction once sent.
    stored: Option<(String, causeway_core::CausalClock)>,
}

struct ScoutNode {
    scout: Scout,
    script: Vec<ScriptTx>,
    next: usize,
    tx: Option<TxRun>,
    home: DcId,
    rtt_home: u64,
    default_dc: DcId,
    /// Target set by the last reconnect fault.
    preferred: Option<DcId>,
    offline: bool,
    probe: VecDeque<DcId>,
    started: bool,
    reconnect_pending: bool,
}

/// A finished run.
pub struct RunResult {
    pub trace: Trace,
    pub quiesced: bool,
}

pub fn run(cfg: &SimConfig) -> Result<RunResult, ConfigError> {
    cfg.validate()?;
    let wl = workload::generate(cfg)?;
    let mut sim = Sim::new(cfg, wl);
    sim.run();
    Ok(sim.finish())
}

struct Sim<'a> {
    cfg: &'a SimConfig,
    now: u64,
    seq: u64,
    queue: BinaryHeap<Scheduled>,
    rng: ChaCha8Rng,
    dcs: Vec<DcNode>,
    scouts: Vec<ScoutNode>,
    partitioned: BTreeSet<Link>,
    last_delivery: BTreeMap<(Endpoint, Endpoint), u64>,
    faults: Vec<FaultEvent>,
    records: Vec<Record>,
    session_in_flight: usize,
    scheduled_faults: usize,
    messages: u64,
    gossip_messages: u64,
    dropped: u64,
    fetch_served: BTreeMap<(ScoutId, u64), u64>,
    stopping: bool,
    horizon_reached: bool,
}

impl<'a> Sim<'a> {
    fn new(cfg: &'a SimConfig, wl: workload::Workload) -> Self {
        let n = cfg.num_dcs;
        let m = &cfg.mutations;
        let mut rng = workload::stream(cfg.seed, NET_STREAM);
        let dcs = (0..n)
            .map(|i| {
                let mut dcfg = DcConfig::new(DcId(i as u16), n, cfg.k);
                dcfg.notify_mode = cfg.notify_mode;
                dcfg.dedup = !m.disable_dedup;
                dcfg.k_gating = !m.disable_k_gating;
                let mut durable = DurableState::new(n);
                durable.checkpoint = wl.initial.clone();
                let mut dc = DataCentre::from_durable(dcfg, durable);
                workload::register_procedures(&mut dc);
                DcNode { dc, up: true, crash_armed: None, last_visible: VersionVector::zero(n), prune_bound: VersionVector::zero(n) }
            })
            .collect();
        let scouts = wl
            .scripts
            .into_iter()
            .enumerate()
            .map(|(i, script)| {
                let mut scfg = ScoutConfig::new(ScoutId(i as u32), n, cfg.cache_capacity);
                scfg.k_gating = !m.disable_k_gating;
                scfg.reorder_session = m.reorder_session;
                let home = DcId((i % n) as u16);
                let rtt_home = rng.random_range(cfg.scout_rtt_ms[0]..=cfg.scout_rtt_ms[1]);
                let rtt = |d: usize| rtt_home + cfg.dc_rtt_ms[home.index()][d];
                let default_dc = match cfg.session_dc {
                    SessionDc::Home => home,
                    SessionDc::Fixed(d) => DcId(d),
                    SessionDc::Farthest => {
                        DcId((0..n).max_by_key(|d| (rtt(*d), std::cmp::Reverse(*d))).expect("n >= 1") as u16)
                    }
                };
                ScoutNode {
                    scout: Scout::new(scfg),
                    script,
                    next: 0,
                    tx: None,
                    home,
                    rtt_home,
                    default_dc,
                    preferred: None,
                    offline: false,
                    probe: VecDeque::new(),
                    started: false,
                    reconnect_pending: false,
                }
            })
            .collect();
        let mut sim = Sim {
            cfg,
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            rng,
            dcs,
            scouts,
            partitioned: BTreeSet::new(),
            last_delivery: BTreeMap::new(),
            faults: cfg.fault_schedule(),
            records: Vec::new(),
            session_in_flight: 0,
            scheduled_faults: 0,
            messages: 0,
            gossip_messages: 0,
            dropped: 0,
            fetch_served: BTreeMap::new(),
            stopping: false,
            horizon_reached: false,
        };
        sim.log(Event::Initial { objects: wl.initial.into_iter().collect() });
        for d in 0..n {
            // Stagger the timers so that DCs do not act in lockstep.
            sim.schedule(1 + d as u64, Action::GossipTick(d));
            sim.schedule(2 + d as u64, Action::NotifyTick(d));
            sim.schedule(cfg.prune_interval_ms + d as u64, Action::PruneTick(d));
        }
        sim.schedule(cfg.gossip_interval_ms, Action::QuiesceCheck);
        for i in 0..sim.faults.len() {
            sim.scheduled_faults += 1;
            sim.schedule(sim.faults[i].at_ms, Action::Fault(i));
        }
        for s in 0..sim.scouts.len() {
            sim.schedule(0, Action::Reconnect(s));
        }
        sim
    }

    fn log(&mut self, event: Event) {
        self.records.push(Record { t: self.now, event });
    }

    fn schedule(&mut self, time: u64, action: Action) {
        self.seq += 1;
        self.queue.push(Scheduled { time, seq: self.seq, action });
    }

    fn after(&mut self, delay: u64, action: Action) {
        self.schedule(self.now + delay, action);
    }

    fn rtt(&self, a: Endpoint, b: Endpoint) -> u64 {
        match (a, b) {
            (Endpoint::Dc(x), Endpoint::Dc(y)) => self.cfg.dc_rtt_ms[x as usize][y as usize],
            (Endpoint::Scout(s), Endpoint::Dc(d)) | (Endpoint::Dc(d), Endpoint::Scout(s)) => {
                let node = &self.scouts[s as usize];
                node.rtt_home + self.cfg.dc_rtt_ms[node.home.index()][d as usize]
            }
            (Endpoint::Scout(_), Endpoint::Scout(_)) => unreachable!("scouts only talk to DCs"),
        }
    }

    fn is_cut(&self, a: Endpoint, b: Endpoint) -> bool {
        self.partitioned.contains(&Link::new(a, b))
    }

    fn send(&mut self, from: Endpoint, to: Endpoint, msg: Msg) {
        self.messages += 1;
        if matches!(msg, Msg::Gossip(_)) {
            self.gossip_messages += 1;
        }
        if self.is_cut(from, to) {
            self.dropped += 1;
            return;
        }
        let rtt = self.rtt(from, to);
        // Split odd round trips so that both directions add up exactly.
        let one_way = if from < to { rtt / 2 } else { rtt - rtt / 2 };
        let jitter = if self.cfg.jitter_ms > 0 { self.rng.random_range(0..=self.cfg.jitter_ms) } else { 0 };
        let last = self.last_delivery.get(&(from, to)).copied().unwrap_or(0);
        let at = (self.now + one_way + jitter).max(last);
        self.last_delivery.insert((from, to), at);
        if !matches!(msg, Msg::Gossip(_)) {
            self.session_in_flight += 1;
        }
        self.schedule(at, Action::Deliver { from, to, msg: Box::new(msg) });
    }

    fn run(&mut self) {
        while let Some(ev) = self.queue.pop() {
            if ev.time > self.cfg.horizon_ms {
                self.horizon_reached = true;
                break;
            }
            self.now = ev.time;
            match ev.action {
                Action::Deliver { from, to, msg } => self.deliver(from, to, *msg),
                Action::GossipTick(d) => self.gossip_tick(d),
                Action::NotifyTick(d) => self.notify_tick(d),
                Action::PruneTick(d) => {
                    let node = &mut self.dcs[d];
                    if node.up {
                        node.dc.prune_up_to(&node.prune_bound);
                        node.prune_bound = node.dc.prune_floor();
                    }
                    if !self.stopping {
                        self.after(self.cfg.prune_interval_ms, Action::PruneTick(d));
                    }
                }
                Action::QuiesceCheck => {
                    if self.quiescent() {
                        self.stopping = true;
                    } else {
                        self.after(self.cfg.gossip_interval_ms, Action::QuiesceCheck);
                    }
                }
                Action::Fault(i) => {
                    self.scheduled_faults -= 1;
                    let f = self.faults[i].fault.clone();
                    self.apply_fault(f);
                }
                Action::Recover(d) => {
                    self.scheduled_faults -= 1;
                    self.recover(d);
                }
                Action::Wake(s) => self.start_tx(s),
                Action::Reconnect(s) => {
                    self.scouts[s].reconnect_pending = false;
                    let node = &self.scouts[s];
                    if !node.offline && *node.scout.session() == SessionState::Disconnected {
                        self.start_connect(s);
                    }
                }
                Action::Detect { scout, epoch } => {
                    if session_epoch(self.scouts[scout].scout.session()) == Some(epoch) {
                        self.lose_session(scout);
                    }
                }
                Action::ConnectTimeout { scout, epoch } => {
                    if matches!(self.scouts[scout].scout.session(), SessionState::Connecting { epoch: e, .. } if *e == epoch)
                    {
                        let out = self.scouts[scout].scout.session_lost();
                        self.handle_output(scout, out);
                        self.next_candidate(scout);
                    }
                }
            }
        }
    }

    fn finish(mut self) -> RunResult {
        let quiesced = self.stopping && !self.horizon_reached;
        if quiesced {
            self.log(Event::Quiesce);
        }
        for d in 0..self.dcs.len() {
            let node = &self.dcs[d];
            let dc = &node.dc;
            let ev = Event::FinalDc {
                dc: dc.id(),
                up: node.up,
                vdc: dc.vdc().clone(),
                visible: dc.visible_frontier(),
                prune_vector: dc.prune_vector().clone(),
                objects: dc.materialized().iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
                stats: dc.stats().clone(),
            };
            self.log(ev);
        }
        for s in 0..self.scouts.len() {
            let node = &self.scouts[s];
            let ev = Event::FinalScout {
                scout: node.scout.id(),
                clock: node.scout.clock().clone(),
                connected: node.scout.connected_dc(),
                offline: node.offline,
                pending: node.scout.pending_commits().iter().map(|p| p.request.otid).collect(),
                completed: node.next,
                script_len: node.script.len(),
            };
            self.log(ev);
        }
        self.log(Event::End {
            quiesced,
            messages: self.messages,
            gossip_messages: self.gossip_messages,
            dropped_messages: self.dropped,
        });
        RunResult { trace: Trace { config: self.cfg.clone(), records: self.records }, quiesced }
    }

    // ---- network input ----

    fn deliver(&mut self, from: Endpoint, to: Endpoint, msg: Msg) {
        if !matches!(msg, Msg::Gossip(_)) {
            self.session_in_flight -= 1;
        }
        if self.is_cut(from, to) {
            self.dropped += 1;
            return;
        }
        match (to, msg) {
            (Endpoint::Dc(d), Msg::ToDc(m)) => {
                let d = d as usize;
                if !self.dcs[d].up {
                    self.dropped += 1;
                    return;
                }
                let outs = self.dcs[d].dc.on_scout_message(m);
                self.after_dc_step(d, outs);
            }
            (Endpoint::Dc(d), Msg::Gossip(batch)) => {
                let d = d as usize;
                if !self.dcs[d].up {
                    self.dropped += 1;
                    return;
                }
                if !batch.records.is_empty() {
                    self.log(Event::GossipDeliver { from: batch.from, to: DcId(d as u16), records: batch.records.len() });
                }
                let outs = self.dcs[d].dc.on_gossip(batch);
                self.after_dc_step(d, outs);
            }
            (Endpoint::Scout(s), Msg::ToScout(m)) => {
                let s = s as usize;
                let Endpoint::Dc(dc) = from else { unreachable!("scouts only hear from DCs") };
                if let DcReply::Notify(batch) = &m.body {
                    if session_epoch(self.scouts[s].scout.session()) == Some(m.epoch) {
                        self.log(Event::Notify {
                            scout: ScoutId(s as u32),
                            dc: DcId(dc),
                            seq: batch.seq,
                            frontier: batch.frontier.clone(),
                            updates: batch.updates.len(),
                        });
                    }
                }
                let out = self.scouts[s].scout.on_message(m);
                self.handle_output(s, out);
            }
            _ => unreachable!("message routed to the wrong kind of node"),
        }
    }

    /// Logs what a DC did and sends its output, unless an armed fault
    /// crashes it first.
    fn after_dc_step(&mut self, d: usize, outs: Vec<DcOutbound>) {
        let events = self.dcs[d].dc.take_events();
        let mut crash = false;
        let id = DcId(d as u16);
        for ev in events {
            match ev {
                DcEvent::GlobalCommit { otid, outcome, deps } => {
                    let effects = match outcome {
                        CommitOutcome::NewGtid(_) => {
                            let log = self.dcs[d].dc.log();
                            log.iter().rev().find(|r| r.otid == otid).map(|r| r.effects.clone()).unwrap_or_default()
                        }
                        _ => Vec::new(),
                    };
                    if matches!(outcome, CommitOutcome::NewGtid(_)) && self.dcs[d].crash_armed.is_some() {
                        crash = true;
                    }
                    self.log(Event::GlobalCommit { dc: id, otid, outcome, deps, effects });
                }
                DcEvent::RemoteApply { otid, gtid, outcome } => {
                    self.log(Event::RemoteApply { dc: id, otid, gtid, outcome });
                }
            }
        }
        if crash {
            let recover = self.dcs[d].crash_armed.take().flatten();
            self.log(Event::Fault { fault: Fault::DcCrash { dc: d as u16 } });
            self.crash(d, recover);
            return;
        }
        for o in outs {
            match o {
                DcOutbound::Scout(m) => {
                    if let DcReply::Fetch(reply) = &m.body {
                        self.fetch_served.insert((m.scout, reply.request_id), self.now);
                    }
                    let to = Endpoint::Scout(m.scout.0);
                    self.send(Endpoint::Dc(d as u16), to, Msg::ToScout(m));
                }
                DcOutbound::Peer { to, batch } => {
                    self.send(Endpoint::Dc(d as u16), Endpoint::Dc(to.0), Msg::Gossip(batch));
                }
            }
        }
    }

    fn gossip_tick(&mut self, d: usize) {
        if self.dcs[d].up {
            for (peer, batch) in self.dcs[d].dc.gossip_tick() {
                self.send(Endpoint::Dc(d as u16), Endpoint::Dc(peer.0), Msg::Gossip(batch));
            }
        }
        if !self.stopping {
            self.after(self.cfg.gossip_interval_ms, Action::GossipTick(d));
        }
    }

    fn notify_tick(&mut self, d: usize) {
        if self.dcs[d].up {
            let visible = self.dcs[d].dc.visible_frontier();
            if visible != self.dcs[d].last_visible {
                self.dcs[d].last_visible = visible.clone();
                let vdc = self.dcs[d].dc.vdc().clone();
                self.log(Event::FrontierAdvance { dc: DcId(d as u16), visible, vdc });
            }
            for m in self.dcs[d].dc.notify_scouts() {
                let to = Endpoint::Scout(m.scout.0);
                self.send(Endpoint::Dc(d as u16), to, Msg::ToScout(m));
            }
        }
        if !self.stopping {
            self.after(self.cfg.notify_interval_ms, Action::NotifyTick(d));
        }
    }

    // ---- faults ----

    fn apply_fault(&mut self, fault: Fault) {
        self.log(Event::Fault { fault: fault.clone() });
        let all_scouts = |v: &[u32], n: usize| -> Vec<usize> {
            if v.is_empty() {
                (0..n).collect()
            } else {
                v.iter().map(|s| *s as usize).collect()
            }
        };
        match fault {
            Fault::DcCrash { dc } => {
                if self.dcs[dc as usize].up {
                    self.crash(dc as usize, None);
                }
            }
            Fault::DcCrashAfterCommit { dc, recover_after_ms } => {
                self.dcs[dc as usize].crash_armed = Some(recover_after_ms);
            }
            Fault::DcRecover { dc } => self.recover(dc as usize),
            Fault::Partition { links } => {
                for l in links {
                    self.partitioned.insert(l);
                    let (dc, scout) = match (l.0, l.1) {
                        (Endpoint::Dc(d), Endpoint::Scout(s)) => (d, s as usize),
                        _ => continue,
                    };
                    if self.scouts[scout].scout.connected_dc() == Some(DcId(dc)) {
                        self.dcs[dc as usize].dc.drop_session(ScoutId(scout as u32));
                        if let Some(epoch) = session_epoch(self.scouts[scout].scout.session()) {
                            self.after(self.cfg.failure_detection_ms, Action::Detect { scout, epoch });
                        }
                    }
                }
            }
            Fault::Heal { links } => {
                if links.is_empty() {
                    self.partitioned.clear();
                } else {
                    for l in links {
                        self.partitioned.remove(&l);
                    }
                }
            }
            Fault::ScoutDisconnect { scouts } => {
                for s in all_scouts(&scouts, self.scouts.len()) {
                    self.scouts[s].offline = true;
                    if *self.scouts[s].scout.session() != SessionState::Disconnected {
                        self.lose_session(s);
                    }
                }
            }
            Fault::ScoutReconnect { scouts, dc } => {
                for s in all_scouts(&scouts, self.scouts.len()) {
                    let node = &mut self.scouts[s];
                    node.offline = false;
                    node.preferred = dc.map(DcId);
                    node.probe.clear();
                    let target = node.preferred.unwrap_or(node.default_dc);
                    let current = match node.scout.session() {
                        SessionState::Connected { dc, .. } | SessionState::Connecting { dc, .. } => Some(*dc),
                        SessionState::Disconnected => None,
                    };
                    if current == Some(target) {
                        continue;
                    }
                    if current.is_some() {
                        self.lose_session(s);
                    }
                    self.start_connect(s);
                }
            }
        }
    }

    fn crash(&mut self, d: usize, recover_after: Option<u64>) {
        self.dcs[d].dc.crash();
        self.dcs[d].up = false;
        for s in 0..self.scouts.len() {
            let session = self.scouts[s].scout.session().clone();
            if let SessionState::Connected { dc, epoch } | SessionState::Connecting { dc, epoch } = session {
                if dc.index() == d {
                    self.after(self.cfg.failure_detection_ms, Action::Detect { scout: s, epoch });
                }
            }
        }
        if let Some(r) = recover_after {
            self.scheduled_faults += 1;
            self.after(r, Action::Recover(d));
        }
    }

    fn recover(&mut self, d: usize) {
        if !self.dcs[d].up {
            self.dcs[d].up = true;
            self.log(Event::Fault { fault: Fault::DcRecover { dc: d as u16 } });
        }
    }

    // ---- sessions ----

    fn lose_session(&mut self, s: usize) {
        if let Some(dc) = session_dc(self.scouts[s].scout.session()) {
            if self.dcs[dc.index()].up {
                self.dcs[dc.index()].dc.drop_session(ScoutId(s as u32));
            }
        }
        self.log(Event::SessionLost { scout: ScoutId(s as u32) });
        let out = self.scouts[s].scout.session_lost();
        self.handle_output(s, out);
        if !self.scouts[s].offline {
            self.schedule_reconnect(s);
        }
    }

    fn schedule_reconnect(&mut self, s: usize) {
        if !self.scouts[s].reconnect_pending {
            self.scouts[s].reconnect_pending = true;
            self.after(self.cfg.reconnect_delay_ms, Action::Reconnect(s));
        }
    }

    /// Candidate DCs in probing order: the preferred one, then by distance.
    fn candidates(&self, s: usize) -> VecDeque<DcId> {
        let node = &self.scouts[s];
        let first = node.preferred.unwrap_or(node.default_dc);
        let mut rest: Vec<DcId> = (0..self.dcs.len()).map(|d| DcId(d as u16)).filter(|d| *d != first).collect();
        rest.sort_by_key(|d| (self.rtt(Endpoint::Scout(s as u32), Endpoint::Dc(d.0)), *d));
        std::iter::once(first).chain(rest).collect()
    }

    fn start_connect(&mut self, s: usize) {
        if self.scouts[s].probe.is_empty() {
            self.scouts[s].probe = self.candidates(s);
        }
        let dc = self.scouts[s].probe.pop_front().expect("at least one DC");
        let out = self.scouts[s].scout.connect(dc);
        let epoch = out.msg.epoch;
        self.send(Endpoint::Scout(s as u32), Endpoint::Dc(dc.0), Msg::ToDc(out.msg));
        self.after(self.cfg.connect_timeout_ms, Action::ConnectTimeout { scout: s, epoch });
    }

    fn next_candidate(&mut self, s: usize) {
        if self.scouts[s].offline {
            return;
        }
        if self.scouts[s].probe.is_empty() {
            self.schedule_reconnect(s);
        } else {
            self.start_connect(s);
        }
    }

    // ---- scout output ----

    fn handle_output(&mut self, s: usize, out: ScoutOutput) {
        for m in out.messages {
            self.send(Endpoint::Scout(s as u32), Endpoint::Dc(m.dc.0), Msg::ToDc(m.msg));
        }
        for ev in out.events {
            self.handle_event(s, ev);
        }
        self.check_durable(s);
    }

    fn handle_event(&mut self, s: usize, ev: ScoutEvent) {
        let id = ScoutId(s as u32);
        match ev {
            ScoutEvent::Connected { dc, frontier } => {
                self.log(Event::Connect { scout: id, dc, accepted: true, frontier });
                self.scouts[s].probe.clear();
                if !self.scouts[s].started {
                    self.scouts[s].started = true;
                    if let Some(first) = self.scouts[s].script.first() {
                        let think = first.think_ms;
                        self.after(think, Action::Wake(s));
                    }
                }
                let node = &mut self.scouts[s];
                if let Some(tx) = node.tx.as_mut().filter(|t| t.waiting == Waiting::Session) {
                    if matches!(node.script[node.next].body, TxBody::Stored { .. }) {
                        self.send_stored(s);
                    } else {
                        tx.waiting = Waiting::Nothing;
                        self.advance(s);
                    }
                }
            }
            ScoutEvent::ConnectRejected { dc, frontier } => {
                self.log(Event::Connect { scout: id, dc, accepted: false, frontier });
                self.next_candidate(s);
            }
            ScoutEvent::ReadCompleted { request_id, result } => {
                let Some(tx) = self.scouts[s].tx.as_mut() else { return };
                let Waiting::Read { request_id: want, missing } = &tx.waiting else { return };
                if *want != request_id {
                    return;
                }
                let missing = missing.clone();
                match result {
                    Ok(values) => {
                        tx.round_trips += 1;
                        tx.waiting = Waiting::Nothing;
                        tx.step += 1;
                        let otid = tx.otid.expect("interactive transactions have an OTID");
                        let served_at = self.fetch_served.remove(&(id, request_id)).unwrap_or(self.now);
                        for (object, value) in values {
                            let from_cache = !missing.contains(&object);
                            let served_at = if from_cache { self.now } else { served_at };
                            self.log(Event::Read { scout: id, otid, object, value, from_cache, served_at });
                        }
                        self.advance(s);
                    }
                    Err(ScoutError::Unavailable) => tx.waiting = Waiting::Session,
                    Err(e) => self.abort(s, e.to_string()),
                }
            }
            ScoutEvent::CommitAcked { otid, outcome } => {
                self.log(Event::CommitAck { scout: id, otid, outcome });
            }
            ScoutEvent::Advanced { .. } => {}
            ScoutEvent::StoredTxCompleted { otid, result } => {
                let Some(tx) = self.scouts[s].tx.as_mut() else { return };
                if tx.waiting != Waiting::Stored(otid) {
                    return;
                }
                tx.round_trips += 1;
                let (name, pinned) = tx.stored.clone().expect("stored transaction was sent");
                let deps = result.as_ref().map_or(pinned, |r| r.snapshot.clone());
                let outcome = match &result {
                    Ok(r) if r.record.is_some() => TxOutcome::Committed,
                    Ok(_) => TxOutcome::ReadOnly,
                    Err(e) => TxOutcome::Aborted(e.clone()),
                };
                self.log(Event::StoredTx { scout: id, otid, name, deps, result });
                self.finish_tx(s, outcome);
            }
            ScoutEvent::Regression { from, to } => {
                self.log(Event::Regression { scout: id, from, to });
            }
        }
    }

    fn check_durable(&mut self, s: usize) {
        let node = &self.scouts[s];
        let Some(Waiting::Durable(otid)) = node.tx.as_ref().map(|t| &t.waiting) else { return };
        if node.scout.durability(*otid) == Durability::KDurable {
            self.scouts[s].tx.as_mut().expect("checked").round_trips += 1;
            self.finish_tx(s, TxOutcome::Committed);
        }
    }

    // ---- transactions ----

    fn start_tx(&mut self, s: usize) {
        let node = &mut self.scouts[s];
        if node.tx.is_some() || node.next >= node.script.len() {
            return;
        }
        let tx = node.script[node.next].clone();
        let id = ScoutId(s as u32);
        match &tx.body {
            TxBody::Interactive(_) => {
                let (otid, snapshot) = node.scout.begin().expect("one transaction at a time");
                node.tx = Some(TxRun {
                    otid: Some(otid),
                    started: self.now,
                    round_trips: 0,
                    step: 0,
                    waiting: Waiting::Nothing,
                    stored: None,
                });
                self.log(Event::TxBegin { scout: id, otid, snapshot, class: tx.class, warmup: tx.warmup });
                self.advance(s);
            }
            TxBody::Stored { .. } => {
                node.tx = Some(TxRun { otid: None, started: self.now, round_trips: 0, step: 0, waiting: Waiting::Session, stored: None });
                if node.scout.connected_dc().is_some() {
                    self.send_stored(s);
                }
            }
        }
    }

    fn send_stored(&mut self, s: usize) {
        let node = &mut self.scouts[s];
        let tx = &node.script[node.next];
        let TxBody::Stored { name, params } = &tx.body else { unreachable!("only stored transactions wait here") };
        let (class, warmup) = (tx.class.clone(), tx.warmup);
        let snapshot = node.scout.clock().clone();
        let out = node.scout.exec_stored_tx(name, params.clone()).expect("connected and idle");
        let ScoutRequest::StoredTx(req) = &out.msg.body else { unreachable!("exec_stored_tx sends a StoredTx") };
        let otid = req.otid;
        let stored = (req.name.clone(), req.deps.clone());
        let run = node.tx.as_mut().expect("waiting transaction");
        run.stored = Some(stored);
        run.otid = Some(otid);
        run.waiting = Waiting::Stored(otid);
        self.log(Event::TxBegin { scout: ScoutId(s as u32), otid, snapshot, class, warmup });
        self.send(Endpoint::Scout(s as u32), Endpoint::Dc(out.dc.0), Msg::ToDc(out.msg));
    }

    /// Runs steps of the active interactive transaction until it must wait.
    fn advance(&mut self, s: usize) {
        let id = ScoutId(s as u32);
        loop {
            let node = &mut self.scouts[s];
            let Some(tx) = node.tx.as_ref() else { return };
            if tx.waiting != Waiting::Nothing {
                return;
            }
            let otid = tx.otid.expect("interactive transactions have an OTID");
            let TxBody::Interactive(steps) = &node.script[node.next].body else { return };
            let Some(step) = steps.get(tx.step).cloned() else {
                self.commit(s);
                return;
            };
            match step {
                Step::Read(objects) => match node.scout.read(&objects) {
                    Ok(ReadStep::Ready(values)) => {
                        node.tx.as_mut().expect("active").step += 1;
                        for (object, value) in values {
                            self.log(Event::Read { scout: id, otid, object, value, from_cache: true, served_at: self.now });
                        }
                    }
                    Ok(ReadStep::Fetch { request_id, missing, message }) => {
                        node.tx.as_mut().expect("active").waiting = Waiting::Read { request_id, missing };
                        self.send(Endpoint::Scout(s as u32), Endpoint::Dc(message.dc.0), Msg::ToDc(message.msg));
                        return;
                    }
                    Err(ScoutError::Unavailable) => {
                        // Retried once a session is up again.
                        node.tx.as_mut().expect("active").waiting = Waiting::Session;
                        return;
                    }
                    Err(e) => {
                        self.abort(s, e.to_string());
                        return;
                    }
                },
                Step::Update { object, intent } => match node.scout.update(&object, &intent) {
                    Ok(effect) => {
                        node.tx.as_mut().expect("active").step += 1;
                        self.log(Event::Update { scout: id, otid, effect });
                    }
                    Err(e) => {
                        self.abort(s, e.to_string());
                        return;
                    }
                },
                Step::Pin(objects) => {
                    for o in &objects {
                        // Overflow leaves the object unpinned; it is still cached.
                        let _ = node.scout.pin(o);
                    }
                    node.tx.as_mut().expect("active").step += 1;
                }
                Step::Unpin(objects) => {
                    for o in &objects {
                        node.scout.unpin(o);
                    }
                    node.tx.as_mut().expect("active").step += 1;
                }
            }
        }
    }

    fn commit(&mut self, s: usize) {
        let id = ScoutId(s as u32);
        let (local, out) = self.scouts[s].scout.commit().expect("transaction active");
        let updated = !local.effects.is_empty();
        if updated {
            self.log(Event::LocalCommit {
                scout: id,
                otid: local.otid,
                snapshot: local.snapshot,
                effects: local.effects,
            });
        }
        for m in local.messages {
            self.send(Endpoint::Scout(s as u32), Endpoint::Dc(m.dc.0), Msg::ToDc(m.msg));
        }
        if updated && self.cfg.sync_commit {
            self.scouts[s].tx.as_mut().expect("active").waiting = Waiting::Durable(local.otid);
        } else {
            self.finish_tx(s, if updated { TxOutcome::Committed } else { TxOutcome::ReadOnly });
        }
        self.handle_output(s, out);
    }

    fn abort(&mut self, s: usize, reason: String) {
        let out = self.scouts[s].scout.rollback();
        self.finish_tx(s, TxOutcome::Aborted(reason));
        self.handle_output(s, out);
    }

    fn finish_tx(&mut self, s: usize, outcome: TxOutcome) {
        let node = &mut self.scouts[s];
        let Some(tx) = node.tx.take() else { return };
        node.next += 1;
        let think = node.script.get(node.next).map(|t| t.think_ms);
        if let Some(otid) = tx.otid {
            self.log(Event::TxEnd {
                scout: ScoutId(s as u32),
                otid,
                outcome,
                round_trips: tx.round_trips,
                started: tx.started,
            });
        }
        if let Some(think) = think {
            self.after(think, Action::Wake(s));
        }
    }

    // ---- quiescence ----

    fn quiescent(&self) -> bool {
        if self.scheduled_faults > 0 || self.session_in_flight > 0 {
            return false;
        }
        let up: Vec<&DcNode> = self.dcs.iter().filter(|d| d.up).collect();
        let Some(first) = up.first() else { return false };
        let target = first.dc.vdc();
        for d in &up {
            if d.dc.vdc() != target || d.dc.pending_remote_len() > 0 || d.dc.session_queue_len() > 0 {
                return false;
            }
            if up.iter().any(|p| d.dc.known_vector(p.dc.id()) != target) {
                return false;
            }
        }
        self.scouts.iter().all(|n| {
            n.tx.is_none()
                && n.next >= n.script.len()
                && (n.offline
                    || (n.scout.connected_dc().is_some()
                        && n.scout.pending_commits().is_empty()
                        && n.scout.stored_tx_in_flight().is_none()
                        && n.scout.clock().dc == *target))
        })
    }
}

fn session_epoch(s: &SessionState) -> Option<u64> {
    match s {
        SessionState::Connected { epoch, .. } | SessionState::Connecting { epoch, .. } => Some(*epoch),
        SessionState::Disconnected => None,
    }
}

fn session_dc(s: &SessionState) -> Option<DcId> {
    match s {
        SessionState::Connected { dc, .. } | SessionState::Connecting { dc, .. } => Some(*dc),
        SessionState::Disconnected => None,
    }
}
