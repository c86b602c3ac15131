//! Randomized checks of the CRDT laws the protocol relies on.
//!
//! Each case builds a random replica state, prepares two effects from it and
//! compares the orders in which a replica may receive them. Effects are
//! compared as whole states, tombstones included, not just as values.

use causeway_core::clocks::{Otid, ScoutId};
use causeway_core::crdt::{CrdtKind, CrdtState, EffectOp, EffectTag, ObjectId};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::workload::{random_intent, stream};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LawReport {
    pub kind: Option<CrdtKind>,
    pub pairs: usize,
    /// Effects prepared from the same state, applied in both orders.
    pub concurrent_failures: usize,
    /// The second effect prepared after the first, then delivered first.
    pub reordered_failures: usize,
    /// Applying an effect twice differs from applying it once.
    pub duplicate_sensitive: usize,
}

impl LawReport {
    /// Commutativity and order independence hold. Duplicate sensitivity is
    /// reported separately since counters are expected to have it.
    pub fn commutes(&self) -> bool {
        self.concurrent_failures == 0 && self.reordered_failures == 0
    }
}

struct Gen {
    rng: ChaCha8Rng,
    next: u64,
}

impl Gen {
    fn effect(&mut self, obj: &ObjectId, state: &CrdtState) -> EffectOp {
        self.next += 1;
        // Several scouts so that tags from concurrent effects interleave.
        let tag = EffectTag::new(Otid::new(self.next, ScoutId(self.rng.random_range(0..4))), 0);
        let intent = random_intent(obj.kind, &mut self.rng);
        state.prepare(obj, &intent, tag).expect("random intents match their kind")
    }
}

fn applied(state: &CrdtState, effects: &[&EffectOp]) -> CrdtState {
    let mut s = state.clone();
    for e in effects {
        s.apply(e).expect("effects match their kind");
    }
    s
}

pub fn check_crdt_laws(kind: CrdtKind, pairs: usize, seed: u64) -> LawReport {
    let obj = ObjectId::new("law", kind);
    let mut g = Gen { rng: stream(seed, kind as u64), next: 0 };
    let mut report = LawReport { kind: Some(kind), pairs, ..Default::default() };
    for _ in 0..pairs {
        let mut base = CrdtState::new(kind);
        for _ in 0..g.rng.random_range(0..8) {
            let e = g.effect(&obj, &base);
            base.apply(&e).expect("effects match their kind");
        }
        let a = g.effect(&obj, &base);
        let b = g.effect(&obj, &base);
        if applied(&base, &[&a, &b]) != applied(&base, &[&b, &a]) {
            report.concurrent_failures += 1;
        }
        let after_a = applied(&base, &[&a]);
        let c = g.effect(&obj, &after_a);
        if applied(&base, &[&a, &c]) != applied(&base, &[&c, &a]) {
            report.reordered_failures += 1;
        }
        if applied(&base, &[&a, &a]) != after_a {
            report.duplicate_sensitive += 1;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use causeway_core::crdt::{CrdtValue, EffectPayload};

    #[test]
    fn laws_hold_for_every_kind() {
        for kind in CrdtKind::ALL {
            let r = check_crdt_laws(kind, 500, 11);
            assert!(r.commutes(), "{r:?}");
        }
    }

    #[test]
    fn only_counters_are_duplicate_sensitive() {
        for kind in CrdtKind::ALL {
            let r = check_crdt_laws(kind, 500, 5);
            match kind {
                CrdtKind::Counter => assert!(r.duplicate_sensitive > 0),
                // Maps holding counters inherit the sensitivity.
                CrdtKind::Cmap => {}
                _ => assert_eq!(r.duplicate_sensitive, 0, "{kind:?}"),
            }
        }
    }

    #[test]
    fn a_counter_increment_delivered_twice_counts_twice() {
        let obj = ObjectId::new("x", CrdtKind::Counter);
        let e = EffectOp { target: obj, tag: EffectTag::new(Otid::new(1, ScoutId(0)), 0), payload: EffectPayload::Increment(3) };
        let once = applied(&CrdtState::new(CrdtKind::Counter), &[&e]);
        let twice = applied(&once, &[&e]);
        assert_eq!(twice.value(), CrdtValue::Counter(6));
        assert_ne!(once, twice);
    }
}
