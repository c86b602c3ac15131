//! Runs scenarios, re-checks saved traces and sweeps seeds.
//!
//! Reports go to stdout as one JSON object per line; a readable summary goes
//! to stderr. The exit code is 0 when every check passes, 1 when a check
//! fails and 2 for bad input.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use causeway_sim::checker::check;
use causeway_sim::report::{run_and_check, sweep, write_duration_cdf, RunReport, SweepSummary};
use causeway_sim::scenario::{FaultSchedule, SimConfig};
use causeway_sim::trace::Trace;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "causeway", version, about = "Simulate and check causeway deployments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario once (or over several seeds with --sweep) and check the trace.
    Run(RunArgs),
    /// Re-run the checkers on a saved trace.
    Check {
        /// A trace written by `run --out`.
        trace: PathBuf,
    },
    /// Simulate a scenario over consecutive seeds and aggregate the reports.
    Sweep(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Preset name or path to a scenario file.
    #[arg(value_name = "SCENARIO", required_unless_present = "scenario")]
    scenario_arg: Option<String>,
    /// Same as the positional argument.
    #[arg(long, conflicts_with = "scenario_arg")]
    scenario: Option<String>,
    /// Seed of the run, or the first seed of a sweep.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for the report, trace and duration CDF.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Durability threshold K.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    cache_capacity: Option<usize>,
    /// File with `[[faults]]` entries that replace the scenario's own.
    #[arg(long)]
    fault_schedule: Option<PathBuf>,
    /// Number of seeds to run.
    #[arg(long, value_name = "N")]
    sweep: Option<u64>,
}

impl RunArgs {
    fn config(&self) -> Result<SimConfig> {
        let name = self.scenario.as_ref().or(self.scenario_arg.as_ref()).expect("clap requires a scenario");
        let mut cfg = SimConfig::load(name)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(k) = self.k {
            cfg.k = k;
        }
        if let Some(c) = self.cache_capacity {
            cfg.cache_capacity = c;
        }
        if let Some(path) = &self.fault_schedule {
            let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
            cfg.faults = FaultSchedule::from_toml(&text, &path.display().to_string())?.faults;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run(args) if args.sweep.is_some() => cmd_sweep(&args),
        Command::Run(args) => cmd_run(&args),
        Command::Check { trace } => cmd_check(&trace),
        Command::Sweep(args) => cmd_sweep(&args),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn print_line(value: &impl serde::Serialize) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn cmd_run(args: &RunArgs) -> Result<bool> {
    let cfg = args.config()?;
    let (result, report) = run_and_check(&cfg)?;
    eprint!("{}", report.summary());
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        result.trace.write_jsonl(BufWriter::new(create(&dir.join("trace.jsonl"))?))?;
        write_report(&dir.join("report.json"), &report)?;
        write_duration_cdf(&report.check, BufWriter::new(create(&dir.join("durations.csv"))?))?;
    }
    print_line(&report)?;
    Ok(report.check.safe())
}

fn cmd_check(path: &Path) -> Result<bool> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let trace = Trace::read_jsonl(BufReader::new(file)).with_context(|| format!("in {}", path.display()))?;
    let report = RunReport { scenario: trace.config.name.clone(), seed: trace.config.seed, check: check(&trace) };
    eprint!("{}", report.summary());
    print_line(&report)?;
    Ok(report.check.safe())
}

fn cmd_sweep(args: &RunArgs) -> Result<bool> {
    let cfg = args.config()?;
    let n = args.sweep.unwrap_or(10);
    if n == 0 {
        bail!("--sweep needs at least one seed");
    }
    let reports = sweep(&cfg, cfg.seed..cfg.seed + n)?;
    let summary = SweepSummary::of(&reports);
    for r in &reports {
        eprintln!("seed {}: {}", r.seed, if r.check.safe() { "ok" } else { "FAIL" });
        print_line(r)?;
    }
    eprintln!(
        "{} runs, {} unsafe, mean zero-RT {:.3}, max stale reads {:.4}, max stale txs {:.4}",
        summary.runs,
        summary.unsafe_runs,
        summary.mean_zero_rt_fraction,
        summary.max_stale_read_fraction,
        summary.max_stale_tx_fraction
    );
    print_line(&serde_json::json!({ "summary": summary }))?;
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
        let mut w = BufWriter::new(create(&dir.join("sweep.jsonl"))?);
        for r in &reports {
            serde_json::to_writer(&mut w, r)?;
            writeln!(w)?;
        }
        serde_json::to_writer(&mut w, &serde_json::json!({ "summary": summary }))?;
        writeln!(w)?;
    }
    Ok(summary.unsafe_runs == 0)
}

fn create(path: &Path) -> Result<File> {
    File::create(path).with_context(|| format!("cannot create {}", path.display()))
}

fn write_report(path: &Path, report: &RunReport) -> Result<()> {
    let mut w = BufWriter::new(create(path)?);
    serde_json::to_writer(&mut w, report)?;
    writeln!(w)?;
    Ok(())
}
