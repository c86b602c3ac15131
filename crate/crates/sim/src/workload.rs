//! Scripted client sessions.
//!
//! A workload is a list of transactions per scout, fixed before the run from
//! the scenario seed, plus the initial database contents. The social workload
//! models a small social network: one map object per user holding a profile
//! register and sets for the wall, the event log, pending friend requests and
//! friends.

use std::collections::{BTreeMap, BTreeSet};

use causeway_core::clocks::{Otid, ScoutId};
use causeway_core::crdt::{CrdtKind, CrdtState, CrdtValue, EffectTag, ObjectId, UpdateIntent};
use causeway_core::dc::{DataCentre, DcError, StoredTxContext};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::scenario::{ConfigError, Endpoint, Fault, FaultEvent, Link, RandomFaults, SimConfig};

/// Offsets separating the random streams derived from one scenario seed.
const WORKLOAD_STREAM: u64 = 0x776f_726b;
const FAULT_STREAM: u64 = 0x6661_756c;

pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.rotate_left(17) ^ stream)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Step {
    /// One batch: everything not cached is fetched in a single request.
    Read(Vec<ObjectId>),
    Update { object: ObjectId, intent: UpdateIntent },
    Pin(Vec<ObjectId>),
    Unpin(Vec<ObjectId>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TxBody {
    Interactive(Vec<Step>),
    Stored { name: String, params: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptTx {
    pub class: String,
    /// Session set-up and tear-down; excluded from latency metrics.
    #[serde(default)]
    pub warmup: bool,
    /// Idle time before the transaction starts.
    #[serde(default)]
    pub think_ms: u64,
    pub body: TxBody,
}

impl ScriptTx {
    pub fn is_update(&self) -> bool {
        match &self.body {
            TxBody::Interactive(steps) => steps.iter().any(|s| matches!(s, Step::Update { .. })),
            TxBody::Stored { .. } => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum WorkloadConfig {
    Social(SocialConfig),
    Counters(CounterConfig),
    Random(RandomConfig),
    Scripted(ScriptedConfig),
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig::Social(SocialConfig::default())
    }
}

/// Relative weights of the transaction types. Reads and updates on the
/// user's own neighbourhood are weighted separately from non-local reads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SocialWeights {
    pub read_own_wall: f64,
    pub read_friend_wall: f64,
    pub list_friends: f64,
    pub post_status: f64,
    pub message_friend: f64,
    pub accept_friend: f64,
    pub view_other_wall: f64,
    pub list_other_friends: f64,
}

impl Default for SocialWeights {
    fn default() -> Self {
        Self {
            read_own_wall: 0.4,
            read_friend_wall: 0.3,
            list_friends: 0.3,
            post_status: 0.5,
            message_friend: 0.35,
            accept_friend: 0.15,
            view_other_wall: 0.5,
            list_other_friends: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SocialConfig {
    pub users: usize,
    pub friends_per_user: usize,
    /// Fraction of transactions that update something. All updates touch
    /// only the user's own neighbourhood, so this cannot exceed `locality`.
    pub update_fraction: f64,
    /// Fraction of transactions on the user and their friends only.
    pub locality: f64,
    /// Transactions per session, not counting login and logout.
    pub session_length: usize,
    pub think_ms: [u64; 2],
    /// Pending friend requests per user at the start.
    pub initial_requests: usize,
    pub weights: SocialWeights,
}

impl Default for SocialConfig {
    fn default() -> Self {
        Self {
            users: 250,
            friends_per_user: 25,
            update_fraction: 0.1,
            locality: 0.9,
            session_length: 200,
            think_ms: [50, 150],
            initial_requests: 3,
            weights: SocialWeights::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CounterConfig {
    pub counters: usize,
    pub txs_per_scout: usize,
    pub amount: i64,
    /// Fraction of transactions run as stored procedures at the DC.
    pub stored_fraction: f64,
    pub think_ms: [u64; 2],
}

impl Default for CounterConfig {
    fn default() -> Self {
        Self { counters: 8, txs_per_scout: 100, amount: 10, stored_fraction: 0.0, think_ms: [20, 80] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomConfig {
    pub objects_per_kind: usize,
    pub txs_per_scout: usize,
    pub update_fraction: f64,
    pub think_ms: [u64; 2],
}

impl Default for RandomConfig {
    fn default() -> Self {
        Self { objects_per_kind: 4, txs_per_scout: 60, update_fraction: 0.5, think_ms: [20, 80] }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScriptedConfig {
    /// One script per scout; scouts without one stay idle.
    pub scripts: Vec<Vec<ScriptTx>>,
}

fn check_fraction(name: &str, v: f64) -> Result<(), ConfigError> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(ConfigError::Invalid(format!("{name} = {v} is not in [0, 1]")))
    }
}

fn check_range(name: &str, r: [u64; 2]) -> Result<(), ConfigError> {
    if r[0] <= r[1] {
        Ok(())
    } else {
        Err(ConfigError::Invalid(format!("{name} must be [low, high]")))
    }
}

impl WorkloadConfig {
    pub fn validate(&self, sim: &SimConfig) -> Result<(), ConfigError> {
        match self {
            WorkloadConfig::Social(c) => {
                check_fraction("update_fraction", c.update_fraction)?;
                check_fraction("locality", c.locality)?;
                if c.update_fraction > c.locality {
                    return Err(ConfigError::Invalid(format!(
                        "update_fraction {} exceeds locality {}; updates are always local",
                        c.update_fraction, c.locality
                    )));
                }
                if c.users < 2 || c.friends_per_user >= c.users {
                    return Err(ConfigError::Invalid("need at least 2 users and fewer friends than users".into()));
                }
                check_range("think_ms", c.think_ms)?;
                let w = &c.weights;
                let groups = [
                    [w.read_own_wall, w.read_friend_wall, w.list_friends],
                    [w.post_status, w.message_friend, w.accept_friend],
                ];
                if groups.iter().flatten().chain([&w.view_other_wall, &w.list_other_friends]).any(|x| *x < 0.0)
                    || groups.iter().any(|g| g.iter().sum::<f64>() <= 0.0)
                    || w.view_other_wall + w.list_other_friends <= 0.0
                {
                    return Err(ConfigError::Invalid("weights must be non-negative with a positive sum per group".into()));
                }
                Ok(())
            }
            WorkloadConfig::Counters(c) => {
                check_fraction("stored_fraction", c.stored_fraction)?;
                check_range("think_ms", c.think_ms)?;
                if c.counters == 0 {
                    return Err(ConfigError::Invalid("counters must be at least 1".into()));
                }
                Ok(())
            }
            WorkloadConfig::Random(c) => {
                check_fraction("update_fraction", c.update_fraction)?;
                check_range("think_ms", c.think_ms)?;
                if c.objects_per_kind == 0 {
                    return Err(ConfigError::Invalid("objects_per_kind must be at least 1".into()));
                }
                Ok(())
            }
            WorkloadConfig::Scripted(c) => {
                if c.scripts.len() > sim.num_scouts {
                    return Err(ConfigError::Invalid(format!(
                        "{} scripts for {} scouts",
                        c.scripts.len(),
                        sim.num_scouts
                    )));
                }
                Ok(())
            }
        }
    }
}

/// Scripts plus the state every DC starts from.
#[derive(Debug, Clone, PartialEq)]
pub struct Workload {
    pub scripts: Vec<Vec<ScriptTx>>,
    pub initial: BTreeMap<ObjectId, CrdtState>,
}

pub fn generate(cfg: &SimConfig) -> Result<Workload, ConfigError> {
    cfg.workload.validate(cfg)?;
    let mut rng = stream(cfg.seed, WORKLOAD_STREAM);
    Ok(match &cfg.workload {
        WorkloadConfig::Social(c) => gen_social(c, cfg.num_scouts, cfg.cache_capacity, &mut rng),
        WorkloadConfig::Counters(c) => gen_counters(c, cfg.num_scouts, &mut rng),
        WorkloadConfig::Random(c) => gen_random(c, cfg.num_scouts, &mut rng),
        WorkloadConfig::Scripted(c) => {
            let mut scripts = c.scripts.clone();
            scripts.resize(cfg.num_scouts, Vec::new());
            Workload { scripts, initial: BTreeMap::new() }
        }
    })
}

pub fn user(u: usize) -> ObjectId {
    ObjectId::new(format!("user:{u}"), CrdtKind::Cmap)
}

fn field(name: &str, kind: CrdtKind, intent: UpdateIntent) -> UpdateIntent {
    UpdateIntent::field(name, kind, intent)
}

fn set_add(name: &str, element: String) -> UpdateIntent {
    field(name, CrdtKind::AwSet, UpdateIntent::Add(element))
}

/// Tags initial-state effects; no scout has this id.
pub const LOADER: ScoutId = ScoutId(u32::MAX);

/// Symmetric friendship graph without self-loops. Users pick uniformly
/// among those still below the degree cap, so degrees are at most `f` and
/// almost always exactly `f`.
pub fn friend_graph(users: usize, f: usize, rng: &mut ChaCha8Rng) -> Vec<BTreeSet<usize>> {
    let mut friends = vec![BTreeSet::new(); users];
    let mut order: Vec<usize> = (0..users).collect();
    order.shuffle(rng);
    for &u in &order {
        while friends[u].len() < f {
            let candidates: Vec<usize> =
                (0..users).filter(|v| *v != u && friends[*v].len() < f && !friends[u].contains(v)).collect();
            let Some(&v) = candidates.get(rng.random_range(0..candidates.len().max(1))) else { break };
            friends[u].insert(v);
            friends[v].insert(u);
        }
    }
    friends
}

fn pick<'a, T>(rng: &mut ChaCha8Rng, items: &'a [T]) -> &'a T {
    &items[rng.random_range(0..items.len())]
}

fn weighted(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut x = rng.random_range(0.0..total);
    for (i, w) in weights.iter().enumerate() {
        if x < *w {
            return i;
        }
        x -= w;
    }
    weights.len() - 1
}

fn think(rng: &mut ChaCha8Rng, r: [u64; 2]) -> u64 {
    rng.random_range(r[0]..=r[1])
}

pub fn gen_social(c: &SocialConfig, scouts: usize, cache_capacity: usize, rng: &mut ChaCha8Rng) -> Workload {
    let graph = friend_graph(c.users, c.friends_per_user, rng);
    let mut requests: Vec<Vec<usize>> = Vec::with_capacity(c.users);
    let mut initial = BTreeMap::new();
    for (u, friends) in graph.iter().enumerate() {
        let fl: Vec<usize> = friends.iter().copied().collect();
        let mut req: Vec<usize> = fl.choose_multiple(rng, c.initial_requests.min(fl.len())).copied().collect();
        req.sort();
        let mut state = CrdtState::new(CrdtKind::Cmap);
        let mut intents = vec![field("profile", CrdtKind::LwwRegister, UpdateIntent::Assign(format!("user {u}")))];
        intents.extend(fl.iter().map(|f| set_add("friends", format!("u{f}"))));
        intents.extend(req.iter().map(|f| set_add("friend_requests", format!("u{f}"))));
        for (i, intent) in intents.iter().enumerate() {
            let tag = EffectTag::new(Otid::new(u as u64 + 1, LOADER), i as u32);
            let e = state.prepare(&user(u), intent, tag).expect("intents match the user schema");
            state.apply(&e).expect("prepared against this state");
        }
        initial.insert(user(u), state);
        requests.push(req);
    }

    let mut players: Vec<usize> = (0..c.users).collect();
    players.shuffle(rng);
    let w = &c.weights;
    let local_update = if c.locality > 0.0 { c.update_fraction / c.locality } else { 0.0 };
    let mut scripts = Vec::with_capacity(scouts);
    for s in 0..scouts {
        let me = players[s % c.users];
        let mine: Vec<usize> = graph[me].iter().copied().collect();
        let strangers: Vec<usize> = (0..c.users).filter(|v| *v != me && !graph[me].contains(v)).collect();
        let mut pending = requests[me].clone();
        let mut script = Vec::with_capacity(c.session_length + 2);

        let mut home: Vec<ObjectId> = vec![user(me)];
        home.extend(mine.iter().map(|f| user(*f)));
        let pins = if home.len() < cache_capacity { home.clone() } else { Vec::new() };
        let mut login = Vec::new();
        if !pins.is_empty() {
            login.push(Step::Pin(pins.clone()));
        }
        login.push(Step::Read(home.clone()));
        script.push(ScriptTx {
            class: "login".into(),
            warmup: true,
            think_ms: think(rng, c.think_ms),
            body: TxBody::Interactive(login),
        });

        for n in 0..c.session_length {
            let think_ms = think(rng, c.think_ms);
            let local = rng.random_bool(c.locality);
            let (class, steps) = if local && rng.random_bool(local_update.min(1.0)) {
                match weighted(rng, &[w.post_status, w.message_friend, w.accept_friend]) {
                    0 => (
                        "post-status",
                        vec![
                            Step::Read(vec![user(me)]),
                            Step::Update { object: user(me), intent: set_add("wall", format!("u{me}:post{n}")) },
                            Step::Update { object: user(me), intent: set_add("events", format!("post{n}")) },
                            Step::Update {
                                object: user(me),
                                intent: field("profile", CrdtKind::LwwRegister, UpdateIntent::Assign(format!("status {n}"))),
                            },
                        ],
                    ),
                    1 if !mine.is_empty() => {
                        let f = *pick(rng, &mine);
                        (
                            "message-friend",
                            vec![
                                Step::Read(vec![user(me), user(f)]),
                                Step::Update { object: user(f), intent: set_add("wall", format!("u{me}->u{f}:{n}")) },
                                Step::Update { object: user(me), intent: set_add("events", format!("msg{n}")) },
                            ],
                        )
                    }
                    _ if !mine.is_empty() => {
                        // Accept a pending request if one is left, otherwise
                        // re-confirm an existing friendship.
                        let f = if pending.is_empty() { *pick(rng, &mine) } else { pending.remove(0) };
                        (
                            "accept-friend",
                            vec![
                                Step::Read(vec![user(me), user(f)]),
                                Step::Update {
                                    object: user(me),
                                    intent: field("friend_requests", CrdtKind::AwSet, UpdateIntent::Remove(format!("u{f}"))),
                                },
                                Step::Update { object: user(me), intent: set_add("friends", format!("u{f}")) },
                                Step::Update { object: user(f), intent: set_add("friends", format!("u{me}")) },
                            ],
                        )
                    }
                    _ => ("post-status", vec![
                        Step::Read(vec![user(me)]),
                        Step::Update { object: user(me), intent: set_add("wall", format!("u{me}:post{n}")) },
                    ]),
                }
            } else if local {
                match weighted(rng, &[w.read_own_wall, w.read_friend_wall, w.list_friends]) {
                    1 if !mine.is_empty() => ("read-friend-wall", vec![Step::Read(vec![user(*pick(rng, &mine))])]),
                    2 => {
                        let shown: Vec<ObjectId> = mine.choose_multiple(rng, 3).map(|f| user(*f)).collect();
                        ("list-friends", vec![Step::Read(vec![user(me)]), Step::Read(shown)])
                    }
                    _ => ("read-own-wall", vec![Step::Read(vec![user(me)])]),
                }
            } else {
                let other = *pick(rng, if strangers.is_empty() { &mine } else { &strangers });
                if weighted(rng, &[w.view_other_wall, w.list_other_friends]) == 0 {
                    ("view-other-wall", vec![Step::Read(vec![user(other)])])
                } else {
                    let theirs: Vec<usize> = graph[other].iter().copied().collect();
                    let shown: Vec<ObjectId> = theirs.choose_multiple(rng, 3).map(|f| user(*f)).collect();
                    ("list-other-friends", vec![Step::Read(vec![user(other)]), Step::Read(shown)])
                }
            };
            let steps = steps.into_iter().filter(|s| !matches!(s, Step::Read(v) if v.is_empty())).collect();
            script.push(ScriptTx { class: class.into(), warmup: false, think_ms, body: TxBody::Interactive(steps) });
        }
        if !pins.is_empty() {
            script.push(ScriptTx {
                class: "logout".into(),
                warmup: true,
                think_ms: think(rng, c.think_ms),
                body: TxBody::Interactive(vec![Step::Unpin(pins)]),
            });
        }
        scripts.push(script);
    }
    Workload { scripts, initial }
}

pub fn counter(i: usize) -> ObjectId {
    ObjectId::new(format!("c{i}"), CrdtKind::Counter)
}

pub fn gen_counters(c: &CounterConfig, scouts: usize, rng: &mut ChaCha8Rng) -> Workload {
    let all: Vec<usize> = (0..c.counters).collect();
    let scripts = (0..scouts)
        .map(|_| {
            (0..c.txs_per_scout)
                .map(|_| {
                    let n = rng.random_range(1..=2usize.min(c.counters));
                    let keys: Vec<usize> = all.choose_multiple(rng, n).copied().collect();
                    let think_ms = think(rng, c.think_ms);
                    if rng.random_bool(c.stored_fraction) {
                        let mut params = vec![c.amount.to_string()];
                        params.extend(keys.iter().map(|k| counter(*k).key));
                        ScriptTx {
                            class: "stored-increment".into(),
                            warmup: false,
                            think_ms,
                            body: TxBody::Stored { name: "increment".into(), params },
                        }
                    } else {
                        let mut steps = vec![Step::Read(keys.iter().map(|k| counter(*k)).collect())];
                        steps.extend(
                            keys.iter().map(|k| Step::Update { object: counter(*k), intent: UpdateIntent::Increment(c.amount) }),
                        );
                        ScriptTx { class: "increment".into(), warmup: false, think_ms, body: TxBody::Interactive(steps) }
                    }
                })
                .collect()
        })
        .collect();
    Workload { scripts, initial: BTreeMap::new() }
}

pub(crate) fn random_intent(kind: CrdtKind, rng: &mut ChaCha8Rng) -> UpdateIntent {
    let elem = format!("e{}", rng.random_range(0..5));
    match kind {
        CrdtKind::Counter => UpdateIntent::Increment(rng.random_range(-5..=9)),
        CrdtKind::LwwRegister | CrdtKind::MvRegister => UpdateIntent::Assign(elem),
        CrdtKind::AwSet if rng.random_bool(0.3) => UpdateIntent::Remove(elem),
        CrdtKind::AwSet => UpdateIntent::Add(elem),
        CrdtKind::Cmap => {
            let inner = *pick(rng, &[CrdtKind::Counter, CrdtKind::AwSet, CrdtKind::LwwRegister, CrdtKind::MvRegister]);
            let name = format!("f{}", rng.random_range(0..3));
            UpdateIntent::field(name, inner, random_intent(inner, rng))
        }
    }
}

pub fn gen_random(c: &RandomConfig, scouts: usize, rng: &mut ChaCha8Rng) -> Workload {
    let objects: Vec<ObjectId> = CrdtKind::ALL
        .iter()
        .flat_map(|k| (0..c.objects_per_kind).map(move |i| ObjectId::new(format!("{}{i}", k.short()), *k)))
        .collect();
    let scripts = (0..scouts)
        .map(|_| {
            (0..c.txs_per_scout)
                .map(|_| {
                    let n = rng.random_range(1..=3usize.min(objects.len()));
                    let read: Vec<ObjectId> = objects.choose_multiple(rng, n).cloned().collect();
                    let mut steps = vec![Step::Read(read.clone())];
                    let update = rng.random_bool(c.update_fraction);
                    if update {
                        for o in &read {
                            for _ in 0..rng.random_range(1..=2) {
                                steps.push(Step::Update { object: o.clone(), intent: random_intent(o.kind, rng) });
                            }
                        }
                    }
                    ScriptTx {
                        class: if update { "random-update" } else { "random-read" }.into(),
                        warmup: false,
                        think_ms: think(rng, c.think_ms),
                        body: TxBody::Interactive(steps),
                    }
                })
                .collect()
        })
        .collect();
    Workload { scripts, initial: BTreeMap::new() }
}

/// Healed faults in disjoint windows, at most one active at a time.
pub fn random_faults(cfg: &SimConfig, r: &RandomFaults) -> Vec<FaultEvent> {
    let mut rng = stream(cfg.seed, FAULT_STREAM);
    let mut out = Vec::new();
    if r.count == 0 {
        return out;
    }
    let slot = (r.end_ms - r.start_ms) / r.count as u64;
    let dcs = cfg.num_dcs as u16;
    let scouts = cfg.num_scouts as u32;
    for i in 0..r.count as u64 {
        let at = r.start_ms + i * slot + rng.random_range(0..=slot / 4);
        let dur = rng.random_range(slot / 4..=slot / 2).max(1);
        let kinds = if dcs > 1 { 5 } else { 3 };
        let (fault, heal) = match rng.random_range(0..kinds) {
            0 => {
                let dc = rng.random_range(0..dcs);
                (Fault::DcCrash { dc }, Some(Fault::DcRecover { dc }))
            }
            1 => {
                let dc = rng.random_range(0..dcs);
                (Fault::DcCrashAfterCommit { dc, recover_after_ms: Some(dur) }, None)
            }
            2 => {
                let s = rng.random_range(0..scouts);
                (Fault::ScoutDisconnect { scouts: vec![s] }, Some(Fault::ScoutReconnect { scouts: vec![s], dc: None }))
            }
            3 => {
                let a = rng.random_range(0..dcs);
                let b = (a + rng.random_range(1..dcs)) % dcs;
                let links = vec![Link::new(Endpoint::Dc(a), Endpoint::Dc(b))];
                (Fault::Partition { links: links.clone() }, Some(Fault::Heal { links }))
            }
            _ => {
                let s = rng.random_range(0..scouts);
                let dc = rng.random_range(0..dcs);
                (
                    Fault::ScoutReconnect { scouts: vec![s], dc: Some(dc) },
                    Some(Fault::ScoutReconnect { scouts: vec![s], dc: None }),
                )
            }
        };
        out.push(FaultEvent { at_ms: at, fault });
        if let Some(h) = heal {
            out.push(FaultEvent { at_ms: at + dur, fault: h });
        }
    }
    out
}

fn counter_params(params: &[String]) -> Vec<ObjectId> {
    params.iter().map(|k| ObjectId::new(k.clone(), CrdtKind::Counter)).collect()
}

/// `increment(delta, key...)`: adds `delta` to each counter and returns the
/// values it read.
fn proc_increment(ctx: &mut StoredTxContext<'_>, params: &[String]) -> Result<Vec<CrdtValue>, DcError> {
    let (delta, keys) = params.split_first().ok_or_else(|| DcError::Procedure("missing delta".into()))?;
    let delta: i64 = delta.parse().map_err(|_| DcError::Procedure(format!("bad delta {delta:?}")))?;
    let mut values = Vec::with_capacity(keys.len());
    for obj in counter_params(keys) {
        values.push(ctx.read(&obj)?);
        ctx.update(&obj, &UpdateIntent::Increment(delta))?;
    }
    Ok(values)
}

/// `read_counters(key...)`: read-only.
fn proc_read_counters(ctx: &mut StoredTxContext<'_>, params: &[String]) -> Result<Vec<CrdtValue>, DcError> {
    counter_params(params).iter().map(|o| ctx.read(o)).collect()
}

pub fn register_procedures(dc: &mut DataCentre) {
    dc.register_procedure("increment", proc_increment);
    dc.register_procedure("read_counters", proc_read_counters);
}

#[cfg(test)]
mod tests {
    use super::*;

    fn social(users: usize, locality: f64, update: f64, session: usize, scouts: usize) -> Workload {
        let c = SocialConfig { users, locality, update_fraction: update, session_length: session, ..Default::default() };
        gen_social(&c, scouts, 32, &mut stream(7, WORKLOAD_STREAM))
    }

    fn classify(w: &Workload) -> (f64, f64) {
        let txs: Vec<&ScriptTx> = w.scripts.iter().flatten().filter(|t| !t.warmup).collect();
        let updates = txs.iter().filter(|t| t.is_update()).count() as f64;
        let nonlocal = txs.iter().filter(|t| t.class.contains("other")).count() as f64;
        (updates / txs.len() as f64, 1.0 - nonlocal / txs.len() as f64)
    }

    #[test]
    fn realized_mix_is_within_one_point_of_configured() {
        for (locality, update) in [(0.9, 0.1), (0.5, 0.1), (1.0, 0.0)] {
            let w = social(250, locality, update, 2000, 24);
            let (u, l) = classify(&w);
            assert!((u - update).abs() < 0.01, "update fraction {u} vs {update}");
            assert!((l - locality).abs() < 0.01, "locality {l} vs {locality}");
        }
    }

    #[test]
    fn friend_graph_is_symmetric_without_self_loops() {
        let g = friend_graph(250, 25, &mut stream(3, 0));
        for (u, fs) in g.iter().enumerate() {
            assert!(!fs.contains(&u));
            assert!(fs.len() <= 25);
            for f in fs {
                assert!(g[*f].contains(&u));
            }
        }
        let full = g.iter().filter(|f| f.len() == 25).count();
        assert!(full >= 240, "only {full} users reached the target degree");
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = SimConfig::preset("social-90-10").unwrap();
        assert_eq!(generate(&cfg).unwrap(), generate(&cfg).unwrap());
    }

    #[test]
    fn local_transactions_stay_in_the_pinned_neighbourhood() {
        let w = social(250, 0.9, 0.1, 300, 4);
        for script in &w.scripts {
            let Step::Pin(pins) = &match &script[0].body {
                TxBody::Interactive(s) => s,
                _ => unreachable!(),
            }[0] else {
                panic!("login starts by pinning")
            };
            for tx in script.iter().filter(|t| !t.warmup && !t.class.contains("other")) {
                let TxBody::Interactive(steps) = &tx.body else { unreachable!() };
                for s in steps {
                    if let Step::Read(objs) = s {
                        assert!(objs.iter().all(|o| pins.contains(o)), "{} reads outside the pins", tx.class);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_update_mix_has_no_updates() {
        let w = social(100, 0.9, 0.0, 500, 4);
        assert!(w.scripts.iter().flatten().all(|t| !t.is_update()));
    }

    #[test]
    fn random_faults_are_all_healed() {
        let cfg = SimConfig { seed: 11, ..SimConfig::default() };
        let faults = random_faults(&cfg, &RandomFaults { count: 6, start_ms: 1000, end_ms: 7000 });
        let crashes = faults.iter().filter(|f| matches!(f.fault, Fault::DcCrash { .. })).count();
        let recovers = faults.iter().filter(|f| matches!(f.fault, Fault::DcRecover { .. })).count();
        assert_eq!(crashes, recovers);
        let parts = faults.iter().filter(|f| matches!(f.fault, Fault::Partition { .. })).count();
        let heals = faults.iter().filter(|f| matches!(f.fault, Fault::Heal { .. })).count();
        assert_eq!(parts, heals);
    }
}
