//! Operation-based mergeable data types.
//!
//! Every update is split in two phases. [`CrdtState::prepare`] runs once at the
//! replica executing the transaction and turns an [`UpdateIntent`] into a
//! self-contained [`EffectOp`], capturing whatever it observed (for example the
//! tags a set removal must delete). [`CrdtState::apply`] replays that effect at
//! any replica. Effects with distinct tags commute, so replicas that apply the
//! same set of effects reach the same state in any order. Effects are not
//! idempotent in general (a counter increment applied twice counts twice), so
//! the replication layer must deliver each effect exactly once.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clocks::Otid;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CrdtError {
    #[error("{operation} is not defined on a {kind:?}")]
    TypeMismatch { kind: CrdtKind, operation: &'static str },
    #[error("effect targets a {effect:?} but the state is a {state:?}")]
    KindMismatch { state: CrdtKind, effect: CrdtKind },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum CrdtKind {
    LwwRegister,
    MvRegister,
    Counter,
    AwSet,
    Cmap,
}

impl CrdtKind {
    pub const ALL: [CrdtKind; 5] =
        [CrdtKind::LwwRegister, CrdtKind::MvRegister, CrdtKind::Counter, CrdtKind::AwSet, CrdtKind::Cmap];

    pub fn short(self) -> &'static str {
        match self {
            CrdtKind::LwwRegister => "lww",
            CrdtKind::MvRegister => "mv",
            CrdtKind::Counter => "counter",
            CrdtKind::AwSet => "set",
            CrdtKind::Cmap => "map",
        }
    }
}

/// Object identity. The type is part of the key: `("x", Counter)` and
/// `("x", AwSet)` are different objects.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ObjectId {
    pub key: String,
    pub kind: CrdtKind,
}

impl ObjectId {
    pub fn new(key: impl Into<String>, kind: CrdtKind) -> Self {
        Self { key: key.into(), kind }
    }
}

impl fmt::Display for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.key, self.kind.short())
    }
}

/// Key of a nested object inside a [`CrdtKind::Cmap`].
pub type FieldKey = ObjectId;

/// Globally unique effect identity: the producing transaction plus a sequence
/// number inside it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct EffectTag {
    pub otid: Otid,
    pub seq: u32,
}

impl EffectTag {
    pub fn new(otid: Otid, seq: u32) -> Self {
        Self { otid, seq }
    }
}

/// What an application asks for. Turned into an effect by `prepare`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum UpdateIntent {
    Increment(i64),
    /// Register assignment (LWW or multi-value, depending on the target).
    Assign(String),
    Add(String),
    Remove(String),
    /// Update the nested object stored under `field` in a map.
    Field { field: FieldKey, intent: Box<UpdateIntent> },
}

impl UpdateIntent {
    pub fn field(name: impl Into<String>, kind: CrdtKind, intent: UpdateIntent) -> Self {
        UpdateIntent::Field { field: ObjectId::new(name, kind), intent: Box::new(intent) }
    }

    fn name(&self) -> &'static str {
        match self {
            UpdateIntent::Increment(_) => "increment",
            UpdateIntent::Assign(_) => "assign",
            UpdateIntent::Add(_) => "add",
            UpdateIntent::Remove(_) => "remove",
            UpdateIntent::Field { .. } => "field update",
        }
    }
}

/// Type-specific effect data, replayable at any replica.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EffectPayload {
    Increment(i64),
    LwwAssign { value: String, timestamp: u64 },
    MvAssign { value: String, overwrites: BTreeSet<EffectTag> },
    Add { element: String },
    Remove { element: String, observed: BTreeSet<EffectTag> },
    Field { field: FieldKey, payload: Box<EffectPayload> },
}

impl EffectPayload {
    fn kind(&self) -> CrdtKind {
        match self {
            EffectPayload::Increment(_) => CrdtKind::Counter,
            EffectPayload::LwwAssign { .. } => CrdtKind::LwwRegister,
            EffectPayload::MvAssign { .. } => CrdtKind::MvRegister,
            EffectPayload::Add { .. } | EffectPayload::Remove { .. } => CrdtKind::AwSet,
            EffectPayload::Field { .. } => CrdtKind::Cmap,
        }
    }
}

/// A prepared update on one object.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct EffectOp {
    pub target: ObjectId,
    pub tag: EffectTag,
    pub payload: EffectPayload,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LwwEntry {
    pub value: String,
    pub timestamp: u64,
    pub tag: EffectTag,
}

impl LwwEntry {
    fn order_key(&self) -> (u64, EffectTag) {
        (self.timestamp, self.tag)
    }
}

/// Materialized replica state plus the metadata needed to apply future effects.
///
/// Tombstone sets (`overwritten`, `removed`) make application order irrelevant
/// even when a later effect is applied before the one it supersedes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum CrdtState {
    Counter { value: i64 },
    LwwRegister { current: Option<LwwEntry> },
    MvRegister {
        #[serde(with = "pairs")]
        candidates: BTreeMap<EffectTag, String>,
        overwritten: BTreeSet<EffectTag>,
    },
    AwSet { elements: BTreeMap<String, BTreeSet<EffectTag>>, removed: BTreeSet<EffectTag> },
    Cmap {
        #[serde(with = "pairs")]
        fields: BTreeMap<FieldKey, CrdtState>,
    },
}

/// Serializes a map with structured keys as a list of pairs, since JSON
/// object keys must be strings.
mod pairs {
    use std::collections::BTreeMap;

    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<K: Serialize, V: Serialize, S: Serializer>(
        map: &BTreeMap<K, V>,
        ser: S,
    ) -> Result<S::Ok, S::Error> {
        ser.collect_seq(map.iter())
    }

    pub fn deserialize<'de, K, V, D>(de: D) -> Result<BTreeMap<K, V>, D::Error>
    where
        K: Deserialize<'de> + Ord,
        V: Deserialize<'de>,
        D: Deserializer<'de>,
    {
        Ok(Vec::<(K, V)>::deserialize(de)?.into_iter().collect())
    }
}

/// Application-facing value of an object.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum CrdtValue {
    Counter(i64),
    Register(Option<String>),
    MultiValue(BTreeSet<String>),
    Set(BTreeSet<String>),
    Map(BTreeMap<String, CrdtValue>),
}

impl CrdtValue {
    pub fn as_set(&self) -> Option<&BTreeSet<String>> {
        match self {
            CrdtValue::Set(s) | CrdtValue::MultiValue(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_counter(&self) -> Option<i64> {
        match self {
            CrdtValue::Counter(v) => Some(*v),
            _ => None,
        }
    }

    pub fn field(&self, key: &FieldKey) -> Option<&CrdtValue> {
        match self {
            CrdtValue::Map(m) => m.get(&key.to_string()),
            _ => None,
        }
    }
}

impl CrdtState {
    pub fn new(kind: CrdtKind) -> Self {
        match kind {
            CrdtKind::Counter => CrdtState::Counter { value: 0 },
            CrdtKind::LwwRegister => CrdtState::LwwRegister { current: None },
            CrdtKind::MvRegister => {
                CrdtState::MvRegister { candidates: BTreeMap::new(), overwritten: BTreeSet::new() }
            }
            CrdtKind::AwSet => CrdtState::AwSet { elements: BTreeMap::new(), removed: BTreeSet::new() },
            CrdtKind::Cmap => CrdtState::Cmap { fields: BTreeMap::new() },
        }
    }

    pub fn kind(&self) -> CrdtKind {
        match self {
            CrdtState::Counter { .. } => CrdtKind::Counter,
            CrdtState::LwwRegister { .. } => CrdtKind::LwwRegister,
            CrdtState::MvRegister { .. } => CrdtKind::MvRegister,
            CrdtState::AwSet { .. } => CrdtKind::AwSet,
            CrdtState::Cmap { .. } => CrdtKind::Cmap,
        }
    }

    /// Builds the effect realizing `intent` against this (observed) state.
    pub fn prepare(
        &self,
        target: &ObjectId,
        intent: &UpdateIntent,
        tag: EffectTag,
    ) -> Result<EffectOp, CrdtError> {
        if target.kind != self.kind() {
            return Err(CrdtError::KindMismatch { state: self.kind(), effect: target.kind });
        }
        let payload = self.prepare_payload(intent)?;
        Ok(EffectOp { target: target.clone(), tag, payload })
    }

    fn prepare_payload(&self, intent: &UpdateIntent) -> Result<EffectPayload, CrdtError> {
        let mismatch = || CrdtError::TypeMismatch { kind: self.kind(), operation: intent.name() };
        Ok(match (self, intent) {
            (CrdtState::Counter { .. }, UpdateIntent::Increment(d)) => EffectPayload::Increment(*d),
            (CrdtState::LwwRegister { current }, UpdateIntent::Assign(v)) => EffectPayload::LwwAssign {
                value: v.clone(),
                timestamp: current.as_ref().map_or(0, |c| c.timestamp) + 1,
            },
            (CrdtState::MvRegister { candidates, .. }, UpdateIntent::Assign(v)) => {
                EffectPayload::MvAssign { value: v.clone(), overwrites: candidates.keys().copied().collect() }
            }
            (CrdtState::AwSet { .. }, UpdateIntent::Add(e)) => EffectPayload::Add { element: e.clone() },
            (CrdtState::AwSet { elements, .. }, UpdateIntent::Remove(e)) => EffectPayload::Remove {
                element: e.clone(),
                observed: elements.get(e).cloned().unwrap_or_default(),
            },
            (CrdtState::Cmap { fields }, UpdateIntent::Field { field, intent }) => {
                let payload = match fields.get(field) {
                    Some(nested) => nested.prepare_payload(intent)?,
                    None => CrdtState::new(field.kind).prepare_payload(intent)?,
                };
                EffectPayload::Field { field: field.clone(), payload: Box::new(payload) }
            }
            _ => return Err(mismatch()),
        })
    }

    /// Applies a prepared effect. The caller guarantees the effect has not been
    /// applied to this state before.
    pub fn apply(&mut self, effect: &EffectOp) -> Result<(), CrdtError> {
        if effect.target.kind != self.kind() {
            return Err(CrdtError::KindMismatch { state: self.kind(), effect: effect.target.kind });
        }
        self.apply_payload(&effect.payload, effect.tag)
    }

    fn apply_payload(&mut self, payload: &EffectPayload, tag: EffectTag) -> Result<(), CrdtError> {
        let state_kind = self.kind();
        match (self, payload) {
            (CrdtState::Counter { value }, EffectPayload::Increment(d)) => *value += d,
            (CrdtState::LwwRegister { current }, EffectPayload::LwwAssign { value, timestamp }) => {
                let incoming = LwwEntry { value: value.clone(), timestamp: *timestamp, tag };
                if current.as_ref().is_none_or(|c| c.order_key() < incoming.order_key()) {
                    *current = Some(incoming);
                }
            }
            (CrdtState::MvRegister { candidates, overwritten }, EffectPayload::MvAssign { value, overwrites }) => {
                for t in overwrites {
                    candidates.remove(t);
                    overwritten.insert(*t);
                }
                if !overwritten.contains(&tag) {
                    candidates.insert(tag, value.clone());
                }
            }
            (CrdtState::AwSet { elements, removed }, EffectPayload::Add { element }) => {
                if !removed.contains(&tag) {
                    elements.entry(element.clone()).or_default().insert(tag);
                }
            }
            (CrdtState::AwSet { elements, removed }, EffectPayload::Remove { element, observed }) => {
                removed.extend(observed.iter().copied());
                if let Some(tags) = elements.get_mut(element) {
                    tags.retain(|t| !observed.contains(t));
                    if tags.is_empty() {
                        elements.remove(element);
                    }
                }
            }
            (CrdtState::Cmap { fields }, EffectPayload::Field { field, payload }) => {
                if payload.kind() != field.kind {
                    return Err(CrdtError::KindMismatch { state: field.kind, effect: payload.kind() });
                }
                fields.entry(field.clone()).or_insert_with(|| CrdtState::new(field.kind)).apply_payload(payload, tag)?;
            }
            (_, p) => return Err(CrdtError::KindMismatch { state: state_kind, effect: p.kind() }),
        }
        Ok(())
    }

    pub fn value(&self) -> CrdtValue {
        match self {
            CrdtState::Counter { value } => CrdtValue::Counter(*value),
            CrdtState::LwwRegister { current } => CrdtValue::Register(current.as_ref().map(|c| c.value.clone())),
            CrdtState::MvRegister { candidates, .. } => CrdtValue::MultiValue(candidates.values().cloned().collect()),
            CrdtState::AwSet { elements, .. } => CrdtValue::Set(elements.keys().cloned().collect()),
            CrdtState::Cmap { fields } => {
                CrdtValue::Map(fields.iter().map(|(k, v)| (k.to_string(), v.value())).collect())
            }
        }
    }
}
