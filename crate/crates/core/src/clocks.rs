//! Transaction identifiers and vector clocks.
//!
//! A transaction carries two kinds of identity. The [`Otid`] is assigned by the
//! scout that executed it and is globally unique. A [`Gtid`] is assigned by a
//! data centre's sequencer when the transaction is globally committed there; a
//! transaction may end up with several alias GTIDs after failover, and all of
//! them are treated as equivalent.
//!
//! A [`VersionVector`] summarizes a causally closed set of globally committed
//! transactions, one counter per data centre. A [`CausalClock`] extends it with
//! one extra entry counting the transactions committed locally by a scout.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors raised by vector operations over incompatible domains.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClockError {
    #[error("vector domains differ: {left} vs {right} entries")]
    DomainMismatch { left: usize, right: usize },
    #[error("{0} is outside a vector of {1} entries")]
    UnknownOrigin(DcId, usize),
    #[error("durability threshold {k} is outside 1..={n}")]
    ThresholdOutOfRange { k: usize, n: usize },
    #[error("expected one vector per data centre ({expected}), got {actual}")]
    WrongVectorCount { expected: usize, actual: usize },
}

/// Index of a data centre, dense in `0..num_dcs`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DcId(pub u16);

impl DcId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for DcId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DC{}", self.0)
    }
}

/// Unique scout identifier. Never reused within a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScoutId(pub u32);

impl fmt::Display for ScoutId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "S{}", self.0)
    }
}

/// Origin transaction identifier: a per-scout counter plus the scout id.
///
/// Counters start at 1 and strictly increase with each transaction the scout
/// begins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Otid {
    pub counter: u64,
    pub origin: ScoutId,
}

impl Otid {
    pub fn new(counter: u64, origin: ScoutId) -> Self {
        Self { counter, origin }
    }
}

impl fmt::Display for Otid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.counter, self.origin)
    }
}

/// Global transaction identifier: the k-th commit sequenced at a data centre.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Gtid {
    pub counter: u64,
    pub origin: DcId,
}

impl Gtid {
    pub fn new(counter: u64, origin: DcId) -> Self {
        Self { counter, origin }
    }
}

impl fmt::Display for Gtid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{})", self.counter, self.origin)
    }
}

/// Per-DC counters; entry `i` counts the transactions sequenced by DC `i` that
/// are included in the summarized set.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VersionVector(Vec<u64>);

impl VersionVector {
    pub fn zero(num_dcs: usize) -> Self {
        Self(vec![0; num_dcs])
    }

    pub fn from_entries(entries: Vec<u64>) -> Self {
        Self(entries)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn entries(&self) -> &[u64] {
        &self.0
    }

    pub fn get(&self, dc: DcId) -> u64 {
        self.0.get(dc.index()).copied().unwrap_or(0)
    }

    /// Sets one entry. Panics if `dc` is outside the domain.
    pub fn set(&mut self, dc: DcId, value: u64) {
        self.0[dc.index()] = value;
    }

    fn same_domain(&self, other: &Self) -> Result<(), ClockError> {
        if self.0.len() == other.0.len() {
            Ok(())
        } else {
            Err(ClockError::DomainMismatch { left: self.0.len(), right: other.0.len() })
        }
    }

    /// `self ≤ other` in the component-wise partial order.
    pub fn leq(&self, other: &Self) -> Result<bool, ClockError> {
        self.same_domain(other)?;
        Ok(self.0.iter().zip(&other.0).all(|(a, b)| a <= b))
    }

    /// Component-wise maximum (least upper bound).
    pub fn join(&self, other: &Self) -> Result<Self, ClockError> {
        self.same_domain(other)?;
        Ok(Self(self.0.iter().zip(&other.0).map(|(a, b)| *a.max(b)).collect()))
    }

    /// Component-wise minimum (greatest lower bound).
    pub fn meet(&self, other: &Self) -> Result<Self, ClockError> {
        self.same_domain(other)?;
        Ok(Self(self.0.iter().zip(&other.0).map(|(a, b)| *a.min(b)).collect()))
    }

    /// In-place join.
    pub fn merge(&mut self, other: &Self) -> Result<(), ClockError> {
        self.same_domain(other)?;
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a = (*a).max(*b);
        }
        Ok(())
    }

    /// True iff the transaction sequenced as `gtid` is in the summarized set.
    pub fn covers(&self, gtid: Gtid) -> Result<bool, ClockError> {
        let entry = self
            .0
            .get(gtid.origin.index())
            .ok_or(ClockError::UnknownOrigin(gtid.origin, self.0.len()))?;
        Ok(*entry >= gtid.counter)
    }

    /// Like [`covers`](Self::covers), treating an unknown origin as not covered.
    pub fn includes(&self, gtid: Gtid) -> bool {
        self.covers(gtid).unwrap_or(false)
    }

    /// Raises the entry of `gtid.origin` to at least `gtid.counter`.
    pub fn include(&mut self, gtid: Gtid) {
        let e = &mut self.0[gtid.origin.index()];
        *e = (*e).max(gtid.counter);
    }
}

impl fmt::Display for VersionVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{v}")?;
        }
        f.write_str("]")
    }
}

/// Summarizes the transactions durable at `k` or more of the given vectors.
///
/// `known` holds one vector per data centre. For every entry the result takes
/// the k-th largest value across the inputs, so any GTID it covers is covered
/// by at least `k` of them.
pub fn k_stable_vector(known: &[VersionVector], k: usize) -> Result<VersionVector, ClockError> {
    let first = known.first().ok_or(ClockError::ThresholdOutOfRange { k, n: 0 })?;
    if k == 0 || k > known.len() {
        return Err(ClockError::ThresholdOutOfRange { k, n: known.len() });
    }
    for v in known {
        first.same_domain(v)?;
    }
    let mut column = Vec::with_capacity(known.len());
    let entries = (0..first.len())
        .map(|i| {
            column.clear();
            column.extend(known.iter().map(|v| v.0[i]));
            column.sort_unstable_by(|a, b| b.cmp(a));
            column[k - 1]
        })
        .collect();
    Ok(VersionVector(entries))
}

/// A scout's causal state: one entry per DC plus a scout-local entry.
///
/// The local entry holds the OTID counter of the newest transaction committed
/// locally at the scout. It is only meaningful when compared with clocks of
/// the same scout.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CausalClock {
    pub dc: VersionVector,
    pub local: u64,
}

impl CausalClock {
    pub fn zero(num_dcs: usize) -> Self {
        Self { dc: VersionVector::zero(num_dcs), local: 0 }
    }

    pub fn new(dc: VersionVector, local: u64) -> Self {
        Self { dc, local }
    }

    /// Compares two clocks of the same scout.
    pub fn leq(&self, other: &Self) -> Result<bool, ClockError> {
        Ok(self.dc.leq(&other.dc)? && self.local <= other.local)
    }

    /// Whether a transaction is visible at this clock, as seen by `reader`.
    ///
    /// It is visible if any of its GTIDs is covered by the DC part, or if it
    /// was committed by the reader itself with a counter no greater than the
    /// local entry.
    pub fn sees(&self, reader: ScoutId, otid: Otid, gtids: &[Gtid]) -> bool {
        (otid.origin == reader && otid.counter <= self.local)
            || gtids.iter().any(|g| self.dc.includes(*g))
    }
}

impl fmt::Display for CausalClock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        for (i, v) in self.dc.entries().iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{v}")?;
        }
        write!(f, "|{}]", self.local)
    }
}
