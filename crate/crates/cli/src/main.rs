//! `txnaccel` command line.
//!
//! Exit codes:
//!
//! | code | meaning                                                   |
//! |------|-----------------------------------------------------------|
//! | 0    | success                                                   |
//! | 1    | I/O error (missing input, unwritable output)              |
//! | 2    | usage or configuration error (bad flag, schema, values)   |
//! | 3    | invalid trace or history file                             |
//! | 4    | simulation failed (livelock or runtime error)             |
//! | 5    | verification failed (not serializable, audit, trend)      |
//!
//! Failures print one line to stderr: `error: code=<n> kind=<kind> msg=<text>`.

mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use txnaccel::dse::{read_runs_csv, sweep, trend_report, SweepSpec};
use txnaccel::engine::{metrics_json, write_metrics_csv};
use txnaccel::history::HistoryLog;
use txnaccel::verifier::{check_serializable, full_check, replay_visibility};
use txnaccel::workload::{generate, load_and_validate, TraceError, WorkloadSpec};
use txnaccel::{SimConfig, Simulation, TxnDescriptor};

use config::{ConfigFile, SweepFile};

#[derive(Debug)]
struct CliError {
    code: u8,
    kind: &'static str,
    msg: String,
}

impl CliError {
    fn new(code: u8, kind: &'static str, msg: impl Into<String>) -> Self {
        Self {
            code,
            kind,
            msg: msg.into(),
        }
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        Self::new(1, "io", format!("{}: {e}", path.display()))
    }

    fn config(msg: impl Into<String>) -> Self {
        Self::new(2, "config", msg)
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "txnaccel", version, about = "Cycle-level model of a hardware lock manager and transaction engine")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic order-entry trace.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[command(flatten)]
        over: Overrides,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Check a trace file and report every violation.
    Validate { trace: PathBuf },
    /// Run one simulation; writes metrics.csv, metrics.json and history.txt.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Replay a trace instead of generating one.
        #[arg(long)]
        trace: Option<PathBuf>,
        #[command(flatten)]
        over: Overrides,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        /// Also check serializability and audit the run.
        #[arg(long)]
        verify: bool,
    },
    /// Run a parameter sweep; writes runs.csv, aggregate.csv and trends.txt.
    Sweep {
        spec: PathBuf,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Check a history log for conflict serializability.
    Verify { history: PathBuf },
    /// Summarize per-run CSVs and evaluate trend expectations.
    Report {
        #[arg(required = true)]
        csv: Vec<PathBuf>,
        #[arg(long)]
        expect: Option<PathBuf>,
    },
}

#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    agents_per_channel: Option<usize>,
    #[arg(long)]
    txn_agents: Option<usize>,
    #[arg(long)]
    txncs: Option<usize>,
    #[arg(long)]
    table_size: Option<usize>,
    #[arg(long)]
    timeout_cycles: Option<u64>,
    #[arg(long)]
    mem_latency_cycles: Option<u64>,
    #[arg(long)]
    freq_mhz: Option<f64>,
    #[arg(long)]
    txns_per_agent: Option<usize>,
    #[arg(long)]
    warehouses: Option<usize>,
    #[arg(long)]
    skew: Option<f64>,
    /// Workload seed; the only source of randomness.
    #[arg(long)]
    seed: Option<u64>,
}

impl Overrides {
    fn apply(&self, c: &mut SimConfig, w: &mut WorkloadSpec) {
        let sys = config::SystemSection {
            channels: self.channels,
            agents_per_channel: self.agents_per_channel,
            txn_agents: self.txn_agents,
            txncs: self.txncs,
            table_size: self.table_size,
            timeout_cycles: self.timeout_cycles,
            mem_latency_cycles: self.mem_latency_cycles,
            freq_mhz: self.freq_mhz,
            txns_per_agent: self.txns_per_agent,
            ..Default::default()
        };
        sys.apply(c);
        let wl = config::WorkloadSection {
            warehouses: self.warehouses,
            skew: self.skew,
            seed: self.seed,
            ..Default::default()
        };
        wl.apply(w);
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn make_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn parse_file<T: for<'de> serde::Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = read(path)?;
    config::parse(&text).map_err(|e| CliError::config(format!("{}: {}", path.display(), e.message())))
}

struct Resolved {
    cfg: SimConfig,
    wl: WorkloadSpec,
    trace: Option<PathBuf>,
    out_dir: Option<PathBuf>,
}

/// Defaults, then the config file, then flags. The workload follows the
/// system's agent count and per-agent transaction count.
fn resolve(config: Option<&Path>, over: &Overrides) -> Result<Resolved> {
    let mut cfg = SimConfig::default();
    let mut wl = WorkloadSpec::default();
    let (mut trace, mut out_dir) = (None, None);
    if let Some(path) = config {
        let f: ConfigFile = parse_file(path)?;
        f.system.apply(&mut cfg);
        f.workload.apply(&mut wl);
        trace = f.workload.trace_path(path);
        out_dir = f.output.dir;
    }
    over.apply(&mut cfg, &mut wl);
    finish(&mut cfg, &mut wl)?;
    Ok(Resolved { cfg, wl, trace, out_dir })
}

fn finish(cfg: &mut SimConfig, wl: &mut WorkloadSpec) -> Result<()> {
    wl.txn_agents = cfg.topology.txn_agents;
    wl.txns_per_agent = cfg.txns_per_agent;
    cfg.seed = wl.seed;
    cfg.validate().map_err(|e| CliError::config(e.to_string()))?;
    wl.validate().map_err(|e| CliError::config(e.to_string()))?;
    Ok(())
}

fn load_trace(path: &Path) -> Result<Vec<TxnDescriptor>> {
    load_and_validate(path).map_err(|e| match e {
        TraceError::Io(io) => CliError::io(path, io),
        TraceError::Invalid(v) => {
            for x in &v {
                eprintln!("{}: {x}", path.display());
            }
            let msg = format!("{}: {}", path.display(), TraceError::Invalid(v));
            CliError::new(3, "trace", msg)
        }
    })
}

fn cmd_generate(config: Option<&Path>, over: &Overrides, out: &Path) -> Result<()> {
    let r = resolve(config, over)?;
    let trace = generate(&r.wl).map_err(|e| CliError::config(e.to_string()))?;
    write(out, trace.to_text().as_bytes())?;
    println!("wrote {} txns to {}", trace.txns.len(), out.display());
    Ok(())
}

fn cmd_validate(path: &Path) -> Result<()> {
    let txns = load_trace(path)?;
    let locks: usize = txns.iter().map(|t| t.locks.len()).sum();
    println!("ok: {} txns, {} lock requests", txns.len(), locks);
    Ok(())
}

fn cmd_run(
    config: Option<&Path>,
    trace: Option<&Path>,
    over: &Overrides,
    out_dir: Option<&Path>,
    verify: bool,
) -> Result<()> {
    let r = resolve(config, over)?;
    let txns = match trace.map(Path::to_path_buf).or(r.trace) {
        Some(p) => load_trace(&p)?,
        None => generate(&r.wl).map_err(|e| CliError::config(e.to_string()))?.txns,
    };
    let dir = out_dir
        .map(Path::to_path_buf)
        .or(r.out_dir)
        .unwrap_or_else(|| PathBuf::from("txnaccel-out"));
    let mut sim = Simulation::new(r.cfg, &txns).map_err(|e| CliError::new(3, "trace", e.to_string()))?;
    let res = sim.run_to_end();
    let out = sim.into_output();
    make_dir(&dir)?;
    let hist_path = dir.join("history.txt");
    write(&hist_path, out.history.to_text().as_bytes())?;
    if let Err(e) = res {
        let dump = serde_json::to_string_pretty(&out.state).expect("state serializes");
        write(&dir.join("final_state.json"), dump.as_bytes())?;
        return Err(CliError::new(4, "simulation", e.to_string()));
    }
    let mut csv = Vec::new();
    write_metrics_csv(&mut csv, &[(r.cfg, out.metrics.clone())])
        .map_err(|e| CliError::new(1, "io", e.to_string()))?;
    write(&dir.join("metrics.csv"), &csv)?;
    let json = serde_json::to_string_pretty(&metrics_json(&r.cfg, &out.metrics)).expect("metrics serialize");
    write(&dir.join("metrics.json"), json.as_bytes())?;

    let m = &out.metrics;
    let t = m.throughput();
    println!(
        "{}A{}T {}C{}L: {} committed, {} aborted ({:.3}%), {} cycles, {:.0} txn/s/agent, {:.0} locks/s, history {}",
        r.cfg.topology.txn_agents,
        r.cfg.txn.slots,
        r.cfg.topology.channels,
        r.cfg.topology.agents_per_channel,
        m.committed,
        m.aborted,
        100.0 * m.abort_rate(),
        m.cycles,
        t.txn_per_s_per_agent,
        t.lock_per_s,
        out.history.hash()
    );
    if verify {
        let report = full_check(&out);
        if !report.is_clean() {
            for v in &report.violations {
                eprintln!("{v}");
            }
            return Err(CliError::new(
                5,
                "verify",
                format!("{} violations", report.violations.len()),
            ));
        }
        println!("verified: serializable, audit clean");
    }
    Ok(())
}

fn cmd_sweep(spec_path: &Path, out_dir: Option<&Path>) -> Result<()> {
    let f: SweepFile = parse_file(spec_path)?;
    let mut base = SimConfig::default();
    let mut wl = WorkloadSpec::default();
    f.system.apply(&mut base);
    f.workload.apply(&mut wl);
    if f.workload.trace.is_some() {
        return Err(CliError::config("sweeps generate their workloads; `trace` is not allowed"));
    }
    finish(&mut base, &mut wl)?;
    let spec = SweepSpec {
        base,
        workload: wl,
        axes: f.sweep.axes,
        seeds: f.sweep.seeds,
        verify: f.sweep.verify,
    };
    let result = sweep(&spec).map_err(|e| CliError::config(e.to_string()))?;
    let dir = out_dir
        .map(Path::to_path_buf)
        .or(f.output.dir)
        .unwrap_or_else(|| PathBuf::from("txnaccel-sweep"));
    make_dir(&dir)?;
    let csv_err = |e: csv::Error| CliError::new(1, "io", e.to_string());
    let mut runs = Vec::new();
    result.write_runs_csv(&mut runs).map_err(csv_err)?;
    write(&dir.join("runs.csv"), &runs)?;
    let mut agg = Vec::new();
    result.write_aggregate_csv(&mut agg).map_err(csv_err)?;
    write(&dir.join("aggregate.csv"), &agg)?;
    let failed = result.runs.iter().filter(|r| !r.ok()).count();
    println!(
        "{} points x {} seeds, {} failed runs; wrote {}",
        result.points.len(),
        spec.seeds.len(),
        failed,
        dir.display()
    );
    let report = trend_report(&result, &f.expect);
    if !report.rows.is_empty() {
        let text = report.to_string();
        print!("{text}");
        write(&dir.join("trends.txt"), text.as_bytes())?;
    }
    if failed > 0 && spec.verify {
        return Err(CliError::new(5, "verify", format!("{failed} runs failed")));
    }
    if !report.all_pass() {
        return Err(CliError::new(5, "trend", "trend expectations failed"));
    }
    Ok(())
}

fn cmd_verify(path: &Path) -> Result<()> {
    let text = read(path)?;
    let history = HistoryLog::parse(&text).map_err(|e| CliError::new(3, "history", e.to_string()))?;
    let verdict = check_serializable(&history);
    let stale = replay_visibility(&history);
    let out = serde_json::json!({
        "serializable": verdict.serializable,
        "committed": verdict.committed,
        "edges": verdict.edges,
        "cycle": verdict.cycle,
        "stale_reads": stale.len(),
        "hash": history.hash(),
    });
    println!("{out}");
    if !verdict.serializable {
        return Err(CliError::new(5, "verify", "history is not conflict-serializable"));
    }
    if let Some(s) = stale.first() {
        return Err(CliError::new(
            5,
            "verify",
            format!("txn {} read a stale value at {:#x}", s.txn, s.addr),
        ));
    }
    Ok(())
}

fn cmd_report(paths: &[PathBuf], expect: Option<&Path>) -> Result<()> {
    let mut files = Vec::new();
    for p in paths {
        files.push(fs::File::open(p).map_err(|e| CliError::io(p, e))?);
    }
    let result = read_runs_csv(files).map_err(|e| CliError::new(3, "csv", e.to_string()))?;
    let mut out = std::io::stdout().lock();
    let _ = writeln!(
        out,
        "{:<24} {:>4} {:>6} {:>12} {:>12} {:>12} {:>10}",
        "point", "runs", "failed", "txn/s min", "txn/s avg", "txn/s max", "abort %"
    );
    for p in &result.points {
        let (mn, av, mx) = p
            .txn_per_s
            .map(|s| (format!("{:.0}", s.min), format!("{:.0}", s.avg), format!("{:.0}", s.max)))
            .unwrap_or_default();
        let ab = p.pooled_abort_rate.map(|a| format!("{:.3}", 100.0 * a)).unwrap_or_default();
        let _ = writeln!(out, "{:<24} {:>4} {:>6} {mn:>12} {av:>12} {mx:>12} {ab:>10}", p.label, p.runs, p.failed);
    }
    if let Some(path) = expect {
        // A sweep file or a file holding only [[expect]] tables.
        let f: SweepFile = parse_file(path)?;
        let report = trend_report(&result, &f.expect);
        let _ = write!(out, "\n{report}");
        if !report.all_pass() {
            return Err(CliError::new(5, "trend", "trend expectations failed"));
        }
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Generate { config, over, out } => cmd_generate(config.as_deref(), &over, &out),
        Cmd::Validate { trace } => cmd_validate(&trace),
        Cmd::Run {
            config,
            trace,
            over,
            out_dir,
            verify,
        } => cmd_run(config.as_deref(), trace.as_deref(), &over, out_dir.as_deref(), verify),
        Cmd::Sweep { spec, out_dir } => cmd_sweep(&spec, out_dir.as_deref()),
        Cmd::Verify { history } => cmd_verify(&history),
        Cmd::Report { csv, expect } => cmd_report(&csv, expect.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.msg.replace('\n', " ");
            eprintln!("error: code={} kind={} msg={msg}", e.code, e.kind);
            ExitCode::from(e.code)
        }
    }
}
