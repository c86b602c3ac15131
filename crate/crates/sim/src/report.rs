//! Running scenarios and summarizing the results.

use std::io::Write;

use serde::Serialize;

use crate::checker::{check, CheckKind, CheckReport, Verdict};
use crate::scenario::{ConfigError, SimConfig};
use crate::sim::{run, RunResult};

#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub scenario: String,
    pub seed: u64,
    #[serde(flatten)]
    pub check: CheckReport,
}

impl RunReport {
    /// One line per check plus the headline metrics.
    pub fn summary(&self) -> String {
        let mut out = format!("{} seed {}\n", self.scenario, self.seed);
        for (k, v) in &self.check.verdicts {
            let v = match v {
                Verdict::Pass => "pass".to_string(),
                Verdict::Fail => format!("FAIL ({} violations)", self.check.count(*k)),
                Verdict::Skipped(why) => format!("skipped: {why}"),
            };
            out.push_str(&format!("  {:<20} {v}\n", kebab(*k)));
        }
        let m = &self.check.metrics;
        let l = &self.check.liveness;
        out.push_str(&format!(
            "  txs {} (committed {}, read-only {}, aborted {}), zero-RT {:.3}, p50 {} ms, p99 {} ms\n",
            m.txs, m.committed, m.read_only, m.aborted, m.zero_rt_fraction, m.duration_p50, m.duration_p99
        ));
        out.push_str(&format!(
            "  stale reads {:.4}, stale txs {:.4}, quiesced {}, blocked scouts {}, stalled DCs {}\n",
            m.stale_read_fraction,
            m.stale_tx_fraction,
            l.quiesced,
            l.blocked_scouts.len(),
            l.stalled_dcs.len()
        ));
        out
    }
}

fn kebab(k: CheckKind) -> String {
    serde_json::to_value(k).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default()
}

/// Runs one scenario and checks its trace.
pub fn run_and_check(cfg: &SimConfig) -> Result<(RunResult, RunReport), ConfigError> {
    let result = run(cfg)?;
    let check = check(&result.trace);
    let report = RunReport { scenario: cfg.name.clone(), seed: cfg.seed, check };
    Ok((result, report))
}

/// Runs `cfg` once per seed, spread over the available cores. Reports come
/// back in seed order.
pub fn sweep(cfg: &SimConfig, seeds: impl IntoIterator<Item = u64>) -> Result<Vec<RunReport>, ConfigError> {
    sweep_map(cfg, seeds, |_, report| report)
}

/// Like [`sweep`], handing each run and its report to `f`, for callers that
/// need more than the report.
pub fn sweep_map<T: Send>(
    cfg: &SimConfig,
    seeds: impl IntoIterator<Item = u64>,
    f: impl Fn(RunResult, RunReport) -> T + Sync,
) -> Result<Vec<T>, ConfigError> {
    cfg.validate()?;
    let seeds: Vec<u64> = seeds.into_iter().collect();
    let workers = std::thread::available_parallelism().map_or(4, |n| n.get()).min(seeds.len().max(1));
    let mut slots: Vec<Option<Result<T, ConfigError>>> = (0..seeds.len()).map(|_| None).collect();
    let f = &f;
    std::thread::scope(|scope| {
        let per_worker = seeds.len().div_ceil(workers).max(1);
        for (chunk, my_seeds) in slots.chunks_mut(per_worker).zip(seeds.chunks(per_worker)) {
            scope.spawn(move || {
                for (slot, seed) in chunk.iter_mut().zip(my_seeds) {
                    let cfg = SimConfig { seed: *seed, ..cfg.clone() };
                    *slot = Some(run_and_check(&cfg).map(|(run, report)| f(run, report)));
                }
            });
        }
    });
    slots.into_iter().map(|s| s.expect("every slot is filled")).collect()
}

/// Aggregate of a sweep.
#[derive(Debug, Clone, Default, Serialize)]
pub struct SweepSummary {
    pub runs: usize,
    pub unsafe_runs: usize,
    pub failures: Vec<(CheckKind, usize)>,
    pub mean_zero_rt_fraction: f64,
    pub max_stale_read_fraction: f64,
    pub max_stale_tx_fraction: f64,
    pub mean_stale_read_fraction: f64,
    pub mean_stale_tx_fraction: f64,
    pub not_quiesced: usize,
}

impl SweepSummary {
    pub fn of(reports: &[RunReport]) -> Self {
        let n = reports.len().max(1) as f64;
        let mean = |f: fn(&RunReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let max = |f: fn(&RunReport) -> f64| reports.iter().map(f).fold(0.0, f64::max);
        let failures = CheckKind::ALL
            .iter()
            .map(|k| (*k, reports.iter().filter(|r| r.check.failed(*k)).count()))
            .filter(|(_, n)| *n > 0)
            .collect();
        SweepSummary {
            runs: reports.len(),
            unsafe_runs: reports.iter().filter(|r| !r.check.safe()).count(),
            failures,
            mean_zero_rt_fraction: mean(|r| r.check.metrics.zero_rt_fraction),
            max_stale_read_fraction: max(|r| r.check.metrics.stale_read_fraction),
            max_stale_tx_fraction: max(|r| r.check.metrics.stale_tx_fraction),
            mean_stale_read_fraction: mean(|r| r.check.metrics.stale_read_fraction),
            mean_stale_tx_fraction: mean(|r| r.check.metrics.stale_tx_fraction),
            not_quiesced: reports.iter().filter(|r| !r.check.liveness.quiesced).count(),
        }
    }
}

/// Writes the empirical CDF of transaction durations as `duration_ms,fraction`.
pub fn write_duration_cdf(report: &CheckReport, mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "duration_ms,fraction")?;
    let d = &report.metrics.durations;
    let n = d.len() as f64;
    for (i, ms) in d.iter().enumerate() {
        // One point per distinct duration, at its last occurrence.
        if d.get(i + 1) != Some(ms) {
            writeln!(w, "{ms},{:.6}", (i + 1) as f64 / n)?;
        }
    }
    Ok(())
}
