//! Scenarios and oracles shared by the integration tests.
//!
//! The oracles here read the raw trace and deliberately share no code with
//! the checker.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use causeway_core::crdt::{CrdtState, CrdtValue, EffectOp, EffectPayload, ObjectId, UpdateIntent};
use causeway_core::wire::CommitOutcome;
use causeway_core::Otid;
use causeway_sim::scenario::{Fault, FaultEvent, RandomFaults, SimConfig};
use causeway_sim::trace::{Event, Trace, TxOutcome};
use causeway_sim::workload::{
    counter, CounterConfig, RandomConfig, ScriptTx, ScriptedConfig, Step, TxBody, WorkloadConfig,
};

/// Counters under a DC that crashes right after committing and later
/// recovers, so that scouts replay unacknowledged commits elsewhere.
pub fn crash_after_commit(seed: u64) -> SimConfig {
    SimConfig {
        name: "crash-after-commit".into(),
        seed,
        num_scouts: 6,
        cache_capacity: 8,
        workload: WorkloadConfig::Counters(CounterConfig {
            counters: 4,
            txs_per_scout: 40,
            stored_fraction: 0.3,
            ..Default::default()
        }),
        faults: vec![FaultEvent {
            at_ms: 800,
            fault: Fault::DcCrashAfterCommit { dc: 0, recover_after_ms: Some(1500) },
        }],
        ..SimConfig::default()
    }
}

/// Random operations on every object kind under random, always healed faults.
pub fn random_faults(seed: u64) -> SimConfig {
    SimConfig {
        name: "random-faults".into(),
        seed,
        num_scouts: 6,
        cache_capacity: 8,
        workload: WorkloadConfig::Random(RandomConfig::default()),
        random_faults: Some(RandomFaults { count: 4, start_ms: 200, end_ms: 3000 }),
        ..SimConfig::default()
    }
}

/// A DC crashes for good early in the run.
pub fn single_crash(seed: u64, k: usize, dc: u16) -> SimConfig {
    SimConfig {
        name: format!("crash-dc{dc}-k{k}"),
        seed,
        k,
        num_scouts: 6,
        cache_capacity: 8,
        horizon_ms: 20_000,
        workload: WorkloadConfig::Random(RandomConfig::default()),
        faults: vec![FaultEvent { at_ms: 500, fault: Fault::DcCrash { dc } }],
        ..SimConfig::default()
    }
}

fn tx(class: &str, think_ms: u64, body: TxBody) -> ScriptTx {
    ScriptTx { class: class.into(), warmup: false, think_ms, body }
}

fn read(objects: &[usize]) -> Step {
    Step::Read(objects.iter().map(|i| counter(*i)).collect())
}

/// One scout running a transaction of each round-trip shape. Classes name
/// the expected number of round trips with asynchronous commit.
pub fn round_trip_script(sync_commit: bool) -> SimConfig {
    let inc = |i| Step::Update { object: counter(i), intent: UpdateIntent::Increment(1) };
    let script = vec![
        tx("miss", 100, TxBody::Interactive(vec![read(&[0])])),
        tx("hit", 500, TxBody::Interactive(vec![read(&[0])])),
        tx("two-miss-batches", 500, TxBody::Interactive(vec![read(&[1]), read(&[2])])),
        tx("one-miss-batch", 500, TxBody::Interactive(vec![read(&[3, 4, 5])])),
        tx("mixed-batch", 500, TxBody::Interactive(vec![read(&[0, 6])])),
        tx("update-hit", 500, TxBody::Interactive(vec![read(&[0]), inc(0)])),
        tx("stored", 500, TxBody::Stored { name: "increment".into(), params: vec!["1".into(), counter(1).key] }),
    ];
    SimConfig {
        name: "round-trips".into(),
        num_scouts: 1,
        cache_capacity: 16,
        sync_commit,
        workload: WorkloadConfig::Scripted(ScriptedConfig { scripts: vec![script] }),
        ..SimConfig::default()
    }
}

/// Round trips per transaction class, in script order.
pub fn round_trips_by_class(trace: &Trace) -> Vec<(String, u32, TxOutcome)> {
    let mut class = BTreeMap::new();
    let mut out = Vec::new();
    for (_, e) in trace.events() {
        match e {
            Event::TxBegin { otid, class: c, .. } => {
                class.insert(*otid, c.clone());
            }
            Event::TxEnd { otid, round_trips, outcome, .. } => {
                out.push((class[otid].clone(), *round_trips, outcome.clone()));
            }
            _ => {}
        }
    }
    out
}

/// Effects of every transaction some DC accepted, once per OTID.
pub fn delivered_effects(trace: &Trace) -> BTreeMap<Otid, Vec<EffectOp>> {
    let mut out = BTreeMap::new();
    for (_, e) in trace.events() {
        if let Event::GlobalCommit { otid, outcome: CommitOutcome::NewGtid(_), effects, .. } = e {
            out.entry(*otid).or_insert_with(|| effects.clone());
        }
    }
    out
}

fn increments(p: &EffectPayload) -> i64 {
    match p {
        EffectPayload::Increment(d) => *d,
        EffectPayload::Field { payload, .. } => increments(payload),
        _ => 0,
    }
}

/// Per counter object, the sum of increments over distinct delivered OTIDs.
pub fn counter_sum_oracle(trace: &Trace) -> BTreeMap<ObjectId, i64> {
    let mut sums = BTreeMap::new();
    for effects in delivered_effects(trace).values() {
        for e in effects {
            *sums.entry(e.target.clone()).or_insert(0) += increments(&e.payload);
        }
    }
    sums
}

/// Final object states of the DCs that are up.
pub fn final_states(trace: &Trace) -> Vec<BTreeMap<ObjectId, CrdtState>> {
    trace
        .events()
        .filter_map(|(_, e)| match e {
            Event::FinalDc { up: true, objects, .. } => Some(objects.iter().cloned().collect()),
            _ => None,
        })
        .collect()
}

pub fn counter_value(states: &BTreeMap<ObjectId, CrdtState>, obj: &ObjectId) -> i64 {
    states.get(obj).and_then(|s| s.value().as_counter()).unwrap_or(0)
}

/// The initial database replayed with every delivered transaction, in the
/// order given by `shuffle` applied to OTID order.
pub fn replay_oracle(trace: &Trace, order: impl Fn(&mut Vec<Otid>)) -> BTreeMap<ObjectId, CrdtValue> {
    let mut state: BTreeMap<ObjectId, CrdtState> = BTreeMap::new();
    for (_, e) in trace.events() {
        if let Event::Initial { objects } = e {
            state.extend(objects.iter().cloned());
        }
    }
    let effects = delivered_effects(trace);
    let mut otids: Vec<Otid> = effects.keys().copied().collect();
    order(&mut otids);
    for o in otids {
        for e in &effects[&o] {
            state.entry(e.target.clone()).or_insert_with(|| CrdtState::new(e.target.kind)).apply(e).unwrap();
        }
    }
    values(&state)
}

/// Values, with objects still in their initial empty state left out.
pub fn values(states: &BTreeMap<ObjectId, CrdtState>) -> BTreeMap<ObjectId, CrdtValue> {
    states
        .iter()
        .map(|(k, v)| (k.clone(), v.value()))
        .filter(|(k, v)| *v != CrdtState::new(k.kind).value())
        .collect()
}

/// Zero-round-trip fraction over finished transactions outside warm-up,
/// straight from the trace.
pub fn zero_rt_fraction(trace: &Trace) -> f64 {
    let warm: BTreeSet<Otid> = trace
        .events()
        .filter_map(|(_, e)| match e {
            Event::TxBegin { otid, warmup: true, .. } => Some(*otid),
            _ => None,
        })
        .collect();
    let (mut n, mut zero) = (0usize, 0usize);
    for (_, e) in trace.events() {
        if let Event::TxEnd { otid, round_trips, outcome, .. } = e {
            if warm.contains(otid) || matches!(outcome, TxOutcome::Aborted(_)) {
                continue;
            }
            n += 1;
            if *round_trips == 0 {
                zero += 1;
            }
        }
    }
    zero as f64 / n as f64
}
