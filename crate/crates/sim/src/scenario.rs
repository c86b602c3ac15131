//! Scenario files: everything a run depends on, including the seed.
//!
//! Scenarios are TOML. Every field has a default, so a file only needs to
//! state what differs from the built-in three-DC topology. Presets ship with
//! the crate and can be referred to by name.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use causeway_core::dc::NotifyMode;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::workload::WorkloadConfig;

pub const SCENARIO_SCHEMA: &str = "causeway-scenario/1";

pub const PRESETS: &[(&str, &str)] = &[
    ("social-90-10", include_str!("../scenarios/social-90-10.toml")),
    ("social-50-50", include_str!("../scenarios/social-50-50.toml")),
    ("staleness-stress", include_str!("../scenarios/staleness-stress.toml")),
    ("failover-demo", include_str!("../scenarios/failover-demo.toml")),
];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{origin}: {message}")]
    Parse { origin: String, message: String },
    #[error("invalid scenario: {0}")]
    Invalid(String),
    #[error("no preset or file named {0:?}")]
    NotFound(String),
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn invalid(msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid(msg.into())
}

/// Which DC a scout opens its first session with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SessionDc {
    /// Scout `i` uses DC `i mod num_dcs`, its closest.
    #[default]
    Home,
    /// The DC with the highest round-trip time from the scout.
    Farthest,
    /// Every scout starts on the same DC.
    Fixed(u16),
}

/// Protocol safeguards that can be switched off to check that the checker
/// notices what they prevent.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Mutations {
    pub disable_dedup: bool,
    pub disable_k_gating: bool,
    pub reorder_session: bool,
}

impl Mutations {
    pub fn any(&self) -> bool {
        self.disable_dedup || self.disable_k_gating || self.reorder_session
    }
}

/// A node of the simulated network, written `dc0` or `s3`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Endpoint {
    Dc(u16),
    Scout(u32),
}

impl fmt::Display for Endpoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Endpoint::Dc(i) => write!(f, "dc{i}"),
            Endpoint::Scout(i) => write!(f, "s{i}"),
        }
    }
}

impl FromStr for Endpoint {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || format!("bad endpoint {s:?}, expected dcN or sN");
        if let Some(n) = s.strip_prefix("dc") {
            n.parse().map(Endpoint::Dc).map_err(|_| bad())
        } else if let Some(n) = s.strip_prefix('s') {
            n.parse().map(Endpoint::Scout).map_err(|_| bad())
        } else {
            Err(bad())
        }
    }
}

/// An undirected link, written `dc0-dc1` or `s2-dc0`. Normalized so that the
/// smaller endpoint comes first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Link(pub Endpoint, pub Endpoint);

impl Link {
    pub fn new(a: Endpoint, b: Endpoint) -> Self {
        if a <= b {
            Link(a, b)
        } else {
            Link(b, a)
        }
    }
}

impl TryFrom<String> for Link {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        let (a, b) = s.split_once('-').ok_or_else(|| format!("bad link {s:?}, expected a-b"))?;
        Ok(Link::new(a.parse()?, b.parse()?))
    }
}

impl From<Link> for String {
    fn from(l: Link) -> String {
        format!("{}-{}", l.0, l.1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Fault {
    DcCrash { dc: u16 },
    /// Crash right after the next transaction this DC logs from a scout,
    /// before the reply leaves.
    DcCrashAfterCommit {
        dc: u16,
        #[serde(default)]
        recover_after_ms: Option<u64>,
    },
    DcRecover { dc: u16 },
    Partition { links: Vec<Link> },
    /// Heals the listed links, or every partitioned link if empty.
    Heal {
        #[serde(default)]
        links: Vec<Link>,
    },
    /// Severs the sessions of the listed scouts (all if empty) and keeps them
    /// offline until reconnected.
    ScoutDisconnect {
        #[serde(default)]
        scouts: Vec<u32>,
    },
    /// Moves the listed scouts (all if empty) to `dc`, or back to their
    /// default DC if unset.
    ScoutReconnect {
        #[serde(default)]
        scouts: Vec<u32>,
        #[serde(default)]
        dc: Option<u16>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultEvent {
    pub at_ms: u64,
    #[serde(flatten)]
    pub fault: Fault,
}

/// Generates `count` fault/heal pairs in disjoint windows between `start_ms`
/// and `end_ms`. Every fault is healed inside its window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomFaults {
    pub count: usize,
    pub start_ms: u64,
    pub end_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub schema: String,
    pub name: String,
    pub seed: u64,
    pub num_dcs: usize,
    pub num_scouts: usize,
    pub k: usize,
    /// Round-trip times between DCs in milliseconds; a symmetric matrix.
    pub dc_rtt_ms: Vec<Vec<u64>>,
    /// Range of a scout's round-trip time to its closest DC. Its RTT to any
    /// other DC adds the DC-to-DC RTT.
    pub scout_rtt_ms: [u64; 2],
    /// Uniform extra one-way delay in `0..=jitter_ms`.
    pub jitter_ms: u64,
    pub session_dc: SessionDc,
    pub gossip_interval_ms: u64,
    pub notify_interval_ms: u64,
    pub prune_interval_ms: u64,
    pub cache_capacity: usize,
    pub notify_mode: NotifyMode,
    /// Update transactions wait until K-durable before completing.
    pub sync_commit: bool,
    pub horizon_ms: u64,
    /// Delay before a scout notices its session broke.
    pub failure_detection_ms: u64,
    pub reconnect_delay_ms: u64,
    pub connect_timeout_ms: u64,
    pub mutations: Mutations,
    pub workload: WorkloadConfig,
    pub faults: Vec<FaultEvent>,
    pub random_faults: Option<RandomFaults>,
}

/// Inter-DC round-trip times of the reference three-DC topology.
pub fn reference_topology() -> Vec<Vec<u64>> {
    vec![vec![0, 161, 86], vec![161, 0, 92], vec![86, 92, 0]]
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            schema: SCENARIO_SCHEMA.to_string(),
            name: "custom".to_string(),
            seed: 1,
            num_dcs: 3,
            num_scouts: 3,
            k: 2,
            dc_rtt_ms: reference_topology(),
            scout_rtt_ms: [5, 20],
            jitter_ms: 2,
            session_dc: SessionDc::Home,
            gossip_interval_ms: 50,
            notify_interval_ms: 100,
            prune_interval_ms: 1000,
            cache_capacity: 32,
            notify_mode: NotifyMode::Effects,
            sync_commit: false,
            horizon_ms: 600_000,
            failure_detection_ms: 100,
            reconnect_delay_ms: 50,
            connect_timeout_ms: 1000,
            mutations: Mutations::default(),
            workload: WorkloadConfig::default(),
            faults: Vec::new(),
            random_faults: None,
        }
    }
}

impl SimConfig {
    /// Parses and validates a scenario. `origin` names the source in errors.
    pub fn from_toml(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let cfg: SimConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse { origin: origin.to_string(), message: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario types serialize to TOML")
    }

    pub fn preset(name: &str) -> Option<Self> {
        PRESETS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(n, text)| Self::from_toml(text, n).expect("shipped presets are valid"))
    }

    /// Loads a preset by name, or a scenario file by path.
    pub fn load(name_or_path: &str) -> Result<Self, ConfigError> {
        if let Some(cfg) = Self::preset(name_or_path) {
            return Ok(cfg);
        }
        let path = Path::new(name_or_path);
        if !path.exists() {
            return Err(ConfigError::NotFound(name_or_path.to_string()));
        }
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: name_or_path.to_string(), source })?;
        Self::from_toml(&text, name_or_path)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.schema != SCENARIO_SCHEMA {
            return Err(invalid(format!("schema is {:?}, expected {SCENARIO_SCHEMA:?}", self.schema)));
        }
        let n = self.num_dcs;
        if n == 0 || n > u16::MAX as usize {
            return Err(invalid("num_dcs must be at least 1"));
        }
        if self.k == 0 || self.k > n {
            return Err(invalid(format!("k = {} must be between 1 and num_dcs = {n}", self.k)));
        }
        if self.num_scouts == 0 {
            return Err(invalid("num_scouts must be at least 1"));
        }
        if self.dc_rtt_ms.len() != n || self.dc_rtt_ms.iter().any(|row| row.len() != n) {
            return Err(invalid(format!("dc_rtt_ms must be a {n}x{n} matrix")));
        }
        for i in 0..n {
            if self.dc_rtt_ms[i][i] != 0 {
                return Err(invalid(format!("dc_rtt_ms[{i}][{i}] must be 0")));
            }
            for j in 0..n {
                if self.dc_rtt_ms[i][j] != self.dc_rtt_ms[j][i] {
                    return Err(invalid(format!("dc_rtt_ms is not symmetric at [{i}][{j}]")));
                }
            }
        }
        if self.scout_rtt_ms[0] > self.scout_rtt_ms[1] {
            return Err(invalid("scout_rtt_ms must be [low, high]"));
        }
        if let SessionDc::Fixed(dc) = self.session_dc {
            if dc as usize >= n {
                return Err(invalid(format!("session_dc names dc{dc} but there are {n} DCs")));
            }
        }
        for (name, v) in [
            ("gossip_interval_ms", self.gossip_interval_ms),
            ("notify_interval_ms", self.notify_interval_ms),
            ("prune_interval_ms", self.prune_interval_ms),
            ("horizon_ms", self.horizon_ms),
        ] {
            if v == 0 {
                return Err(invalid(format!("{name} must be positive")));
            }
        }
        let mut last = 0;
        for f in &self.faults {
            if f.at_ms < last {
                return Err(invalid("fault times must be non-decreasing"));
            }
            last = f.at_ms;
            self.validate_fault(&f.fault)?;
        }
        if let Some(r) = &self.random_faults {
            if r.start_ms >= r.end_ms && r.count > 0 {
                return Err(invalid("random_faults window is empty"));
            }
        }
        self.workload.validate(self)?;
        Ok(())
    }

    fn validate_fault(&self, f: &Fault) -> Result<(), ConfigError> {
        let dc_ok = |dc: u16| {
            if (dc as usize) < self.num_dcs {
                Ok(())
            } else {
                Err(invalid(format!("fault names dc{dc} but there are {} DCs", self.num_dcs)))
            }
        };
        let scouts_ok = |scouts: &[u32]| match scouts.iter().find(|s| **s as usize >= self.num_scouts) {
            Some(s) => Err(invalid(format!("fault names s{s} but there are {} scouts", self.num_scouts))),
            None => Ok(()),
        };
        match f {
            Fault::DcCrash { dc } | Fault::DcRecover { dc } | Fault::DcCrashAfterCommit { dc, .. } => dc_ok(*dc),
            Fault::Partition { links } | Fault::Heal { links } => {
                for l in links {
                    for e in [l.0, l.1] {
                        match e {
                            Endpoint::Dc(d) => dc_ok(d)?,
                            Endpoint::Scout(s) => scouts_ok(&[s])?,
                        }
                    }
                }
                Ok(())
            }
            Fault::ScoutDisconnect { scouts } => scouts_ok(scouts),
            Fault::ScoutReconnect { scouts, dc } => {
                scouts_ok(scouts)?;
                dc.map_or(Ok(()), dc_ok)
            }
        }
    }

    /// Explicit faults plus the generated ones, ordered by time.
    pub fn fault_schedule(&self) -> Vec<FaultEvent> {
        let mut all = self.faults.clone();
        if let Some(r) = &self.random_faults {
            all.extend(crate::workload::random_faults(self, r));
        }
        all.sort_by_key(|f| f.at_ms);
        all
    }
}

/// A standalone fault schedule file, as taken by `--fault-schedule`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSchedule {
    #[serde(default)]
    pub faults: Vec<FaultEvent>,
}

impl FaultSchedule {
    pub fn from_toml(text: &str, origin: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError::Parse { origin: origin.to_string(), message: e.to_string() })
    }
}
