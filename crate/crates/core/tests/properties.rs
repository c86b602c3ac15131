use causeway_core::clocks::{k_stable_vector, DcId, Gtid, Otid, ScoutId, VersionVector};
use causeway_core::crdt::{CrdtKind, CrdtState, EffectOp, EffectTag, ObjectId, UpdateIntent};
use causeway_core::wire::{decode, encode};
use proptest::prelude::*;

const N: usize = 3;

fn vector() -> impl Strategy<Value = VersionVector> {
    prop::collection::vec(0u64..6, N).prop_map(VersionVector::from_entries)
}

fn known() -> impl Strategy<Value = Vec<VersionVector>> {
    prop::collection::vec(vector(), N)
}

proptest! {
    #[test]
    fn leq_is_a_partial_order(a in vector(), b in vector(), c in vector()) {
        prop_assert!(a.leq(&a).unwrap());
        if a.leq(&b).unwrap() && b.leq(&a).unwrap() {
            prop_assert_eq!(&a, &b);
        }
        if a.leq(&b).unwrap() && b.leq(&c).unwrap() {
            prop_assert!(a.leq(&c).unwrap());
        }
    }

    #[test]
    fn join_is_the_least_upper_bound(a in vector(), b in vector(), c in vector()) {
        let ab = a.join(&b).unwrap();
        prop_assert_eq!(&ab, &b.join(&a).unwrap());
        prop_assert_eq!(ab.join(&c).unwrap(), a.join(&b.join(&c).unwrap()).unwrap());
        prop_assert_eq!(&a.join(&a).unwrap(), &a);
        prop_assert!(a.leq(&ab).unwrap() && b.leq(&ab).unwrap());
        if a.leq(&c).unwrap() && b.leq(&c).unwrap() {
            prop_assert!(ab.leq(&c).unwrap());
        }
    }

    #[test]
    fn k_stable_shrinks_as_k_grows(vs in known()) {
        for k in 2..=N {
            let tighter = k_stable_vector(&vs, k).unwrap();
            let looser = k_stable_vector(&vs, k - 1).unwrap();
            prop_assert!(tighter.leq(&looser).unwrap());
        }
    }

    #[test]
    fn k_stable_is_monotone(vs in known(), growth in known(), k in 1..=N) {
        let grown: Vec<VersionVector> = vs.iter().zip(&growth).map(|(v, g)| v.join(g).unwrap()).collect();
        prop_assert!(k_stable_vector(&vs, k).unwrap().leq(&k_stable_vector(&grown, k).unwrap()).unwrap());
    }

    #[test]
    fn k_stable_coverage_implies_k_holders(vs in known(), k in 1..=N, dc in 0..N as u16, counter in 1u64..6) {
        let g = Gtid::new(counter, DcId(dc));
        if k_stable_vector(&vs, k).unwrap().includes(g) {
            prop_assert!(vs.iter().filter(|v| v.includes(g)).count() >= k);
        }
    }

    #[test]
    fn k_stable_matches_sorted_column_oracle(vs in known(), k in 1..=N) {
        let got = k_stable_vector(&vs, k).unwrap();
        for i in 0..N {
            let mut column: Vec<u64> = vs.iter().map(|v| v.entries()[i]).collect();
            column.sort();
            column.reverse();
            prop_assert_eq!(got.entries()[i], column[k - 1]);
        }
    }
}

/// Intents valid for each kind, over a small element domain to force
/// collisions.
fn intent(kind: CrdtKind) -> BoxedStrategy<UpdateIntent> {
    let elem = prop::sample::select(vec!["a", "b", "c"]).prop_map(String::from);
    match kind {
        CrdtKind::Counter => (-5i64..=5).prop_map(UpdateIntent::Increment).boxed(),
        CrdtKind::LwwRegister | CrdtKind::MvRegister => elem.prop_map(UpdateIntent::Assign).boxed(),
        CrdtKind::AwSet => {
            prop_oneof![elem.clone().prop_map(UpdateIntent::Add), elem.prop_map(UpdateIntent::Remove)].boxed()
        }
        CrdtKind::Cmap => {
            let field = prop::sample::select(vec![CrdtKind::Counter, CrdtKind::AwSet, CrdtKind::LwwRegister]);
            field
                .prop_flat_map(|k| intent(k).prop_map(move |i| UpdateIntent::field(format!("f{k:?}"), k, i)))
                .boxed()
        }
    }
}

/// Builds effects where each one is prepared against a replica that has seen
/// an arbitrary subset of the earlier ones, modelling concurrency.
fn history(kind: CrdtKind) -> impl Strategy<Value = Vec<EffectOp>> {
    prop::collection::vec((intent(kind), prop::collection::vec(any::<bool>(), 8), 0u32..4), 1..8).prop_map(
        move |steps| {
            let obj = ObjectId::new("x", kind);
            let mut effects: Vec<EffectOp> = Vec::new();
            for (i, (intent, seen, scout)) in steps.into_iter().enumerate() {
                let mut view = CrdtState::new(kind);
                for (e, s) in effects.iter().zip(seen.iter().cycle()) {
                    if *s {
                        view.apply(e).unwrap();
                    }
                }
                let tag = EffectTag::new(Otid::new(i as u64 + 1, ScoutId(scout)), 0);
                effects.push(view.prepare(&obj, &intent, tag).unwrap());
            }
            effects
        },
    )
}

fn apply_all<'a>(kind: CrdtKind, effects: impl IntoIterator<Item = &'a EffectOp>) -> CrdtState {
    let mut s = CrdtState::new(kind);
    for e in effects {
        s.apply(e).unwrap();
    }
    s
}

fn kind() -> impl Strategy<Value = CrdtKind> {
    prop::sample::select(CrdtKind::ALL.to_vec())
}

proptest! {
    #[test]
    fn delivery_order_does_not_matter(
        (k, effects, seed) in kind().prop_flat_map(|k| (Just(k), history(k), any::<u64>()))
    ) {
        let forward = apply_all(k, &effects);
        let backward = apply_all(k, effects.iter().rev());
        prop_assert_eq!(&forward, &backward);
        // A pseudo-random rotation as a third order.
        let r = (seed as usize) % effects.len();
        let rotated = apply_all(k, effects[r..].iter().chain(&effects[..r]));
        prop_assert_eq!(forward.value(), rotated.value());
    }

    #[test]
    fn states_round_trip_through_the_wire_encoding(
        (k, effects) in kind().prop_flat_map(|k| (Just(k), history(k)))
    ) {
        let s = apply_all(k, &effects);
        let bytes = encode(&s);
        let back: CrdtState = decode(&bytes).unwrap();
        prop_assert_eq!(&back, &s);
        prop_assert_eq!(encode(&back), bytes);
    }
}
