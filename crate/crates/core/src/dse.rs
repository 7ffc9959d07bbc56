//! Design-space sweeps: run a grid of configurations over several workload
//! seeds, aggregate min/avg/max per point and check trend expectations.
//!
//! Axes name a configuration parameter and list its values. Two composite
//! axes take the usual configuration labels:
//!
//! * `lock_tables`: `<M>C<P>L`, M channels with P lock agents each
//! * `txn_setting`: `<N>A<T>T`, N transaction agents with T slots each
//!
//! Runs are independent and go through rayon. Results are sorted by
//! (point, seed) before anything is written, so output does not depend on
//! scheduling.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{csv_row, run, SimConfig, CSV_HEADER};
use crate::metrics::RunMetrics;
use crate::verifier::full_check;
use crate::workload::{generate, WorkloadSpec};

pub const MIN_SEEDS: usize = 3;

/// Leading columns of the engine CSV row that echo the configuration.
const CONFIG_COLUMNS: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub name: String,
    pub values: Vec<String>,
}

impl Axis {
    pub fn new(name: &str, values: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            values: values.iter().map(|v| v.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepSpec {
    pub base: SimConfig,
    pub workload: WorkloadSpec,
    pub axes: Vec<Axis>,
    pub seeds: Vec<u64>,
    /// Run the verifier on every history and fail runs it rejects.
    pub verify: bool,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SweepError {
    #[error("unknown sweep parameter `{0}`")]
    UnknownParameter(String),
    #[error("bad value `{value}` for {name}")]
    BadValue { name: String, value: String },
    #[error("axis `{0}` has no values")]
    EmptyAxis(String),
    #[error("need at least {MIN_SEEDS} seeds per point, got {0}")]
    TooFewSeeds(usize),
    #[error("duplicate seed {0}")]
    DuplicateSeed(u64),
}

pub const PARAMETERS: [&str; 15] = [
    "lock_tables",
    "txn_setting",
    "channels",
    "agents_per_channel",
    "txn_agents",
    "txncs",
    "table_size",
    "pool_size",
    "search_limit",
    "timeout_cycles",
    "mem_latency_cycles",
    "freq_mhz",
    "txns_per_agent",
    "warehouses",
    "skew",
];

// "4C4L" -> (4, 4)
fn parse_pair(v: &str, a: char, b: char) -> Option<(usize, usize)> {
    let body = v.strip_suffix(b)?;
    let (x, y) = body.split_once(a)?;
    Some((x.parse().ok()?, y.parse().ok()?))
}

/// Set one named parameter on a configuration pair.
pub fn apply_param(
    cfg: &mut SimConfig,
    wl: &mut WorkloadSpec,
    name: &str,
    value: &str,
) -> Result<(), SweepError> {
    let bad = || SweepError::BadValue {
        name: name.to_string(),
        value: value.to_string(),
    };
    let int = || value.parse::<usize>().map_err(|_| bad());
    let float = || value.parse::<f64>().map_err(|_| bad());
    match name {
        "lock_tables" => {
            let (m, p) = parse_pair(value, 'C', 'L').ok_or_else(bad)?;
            cfg.topology.channels = m;
            cfg.topology.agents_per_channel = p;
        }
        "txn_setting" => {
            let (n, t) = parse_pair(value, 'A', 'T').ok_or_else(bad)?;
            cfg.topology.txn_agents = n;
            cfg.txn.slots = t;
        }
        "channels" => cfg.topology.channels = int()?,
        "agents_per_channel" => cfg.topology.agents_per_channel = int()?,
        "txn_agents" => cfg.topology.txn_agents = int()?,
        "txncs" => cfg.txn.slots = int()?,
        "table_size" => cfg.lock_agent.table_size = int()?,
        "pool_size" => cfg.lock_agent.pool_size = int()?,
        "search_limit" => cfg.lock_agent.search_limit = int()?,
        "timeout_cycles" => cfg.txn.timeout = int()? as u64,
        "mem_latency_cycles" => cfg.txn.costs.mem_latency = int()? as u64,
        "freq_mhz" => cfg.freq_mhz = float()?,
        "txns_per_agent" => cfg.txns_per_agent = int()?,
        "warehouses" => wl.warehouses = int()?,
        "skew" => wl.skew = float()?,
        other => return Err(SweepError::UnknownParameter(other.to_string())),
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Point {
    pub index: usize,
    pub label: String,
    pub config: SimConfig,
    pub workload: WorkloadSpec,
}

impl SweepSpec {
    pub fn new(base: SimConfig, workload: WorkloadSpec, seeds: Vec<u64>) -> Self {
        Self {
            base,
            workload,
            axes: Vec::new(),
            seeds,
            verify: false,
        }
    }

    pub fn axis(mut self, name: &str, values: &[&str]) -> Self {
        self.axes.push(Axis::new(name, values));
        self
    }

    pub fn validate(&self) -> Result<(), SweepError> {
        if self.seeds.len() < MIN_SEEDS {
            return Err(SweepError::TooFewSeeds(self.seeds.len()));
        }
        let mut seen = std::collections::HashSet::new();
        for &s in &self.seeds {
            if !seen.insert(s) {
                return Err(SweepError::DuplicateSeed(s));
            }
        }
        let (mut c, mut w) = (self.base, self.workload);
        for a in &self.axes {
            if a.values.is_empty() {
                return Err(SweepError::EmptyAxis(a.name.clone()));
            }
            for v in &a.values {
                apply_param(&mut c, &mut w, &a.name, v)?;
            }
        }
        Ok(())
    }

    /// Cartesian product of the axes, first axis outermost. No axes gives
    /// the base configuration as the only point.
    pub fn points(&self) -> Result<Vec<Point>, SweepError> {
        self.validate()?;
        let mut points = vec![(Vec::<String>::new(), self.base, self.workload)];
        for a in &self.axes {
            let mut next = Vec::with_capacity(points.len() * a.values.len());
            for (labels, cfg, wl) in &points {
                for v in &a.values {
                    let (mut c, mut w) = (*cfg, *wl);
                    apply_param(&mut c, &mut w, &a.name, v)?;
                    let mut l = labels.clone();
                    l.push(if a.name == "lock_tables" || a.name == "txn_setting" {
                        v.clone()
                    } else {
                        format!("{}={}", a.name, v)
                    });
                    next.push((l, c, w));
                }
            }
            points = next;
        }
        Ok(points
            .into_iter()
            .enumerate()
            .map(|(index, (labels, config, workload))| Point {
                index,
                label: if labels.is_empty() { "base".into() } else { labels.join(",") },
                config,
                workload,
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunRecord {
    pub point: usize,
    pub label: String,
    pub seed: u64,
    pub config: SimConfig,
    pub metrics: Option<RunMetrics>,
    pub history_hash: Option<String>,
    pub error: Option<String>,
}

impl RunRecord {
    pub fn ok(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Spread {
    pub min: f64,
    pub avg: f64,
    pub max: f64,
}

impl Spread {
    fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let min = xs.iter().copied().fold(f64::INFINITY, f64::min);
        let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Some(Self {
            min,
            avg: xs.iter().sum::<f64>() / xs.len() as f64,
            max,
        })
    }

    pub fn width(&self) -> f64 {
        self.max - self.min
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointSummary {
    pub point: usize,
    pub label: String,
    pub config: SimConfig,
    pub runs: usize,
    pub failed: usize,
    pub txn_per_s: Option<Spread>,
    pub committed_per_s: Option<Spread>,
    pub txn_per_s_per_agent: Option<Spread>,
    pub abort_rate: Option<Spread>,
    /// Aborted over attempted, summed across seeds.
    pub pooled_abort_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepResult {
    pub runs: Vec<RunRecord>,
    pub points: Vec<PointSummary>,
}

fn run_one(p: &Point, seed: u64, verify: bool) -> RunRecord {
    let mut cfg = p.config;
    cfg.seed = seed;
    let wl = WorkloadSpec {
        txn_agents: cfg.topology.txn_agents,
        txns_per_agent: cfg.txns_per_agent,
        seed,
        ..p.workload
    };
    let mut rec = RunRecord {
        point: p.index,
        label: p.label.clone(),
        seed,
        config: cfg,
        metrics: None,
        history_hash: None,
        error: None,
    };
    let trace = match generate(&wl) {
        Ok(t) => t,
        Err(e) => {
            rec.error = Some(format!("workload: {e}"));
            return rec;
        }
    };
    match run(&cfg, &trace.txns) {
        Ok(out) => {
            if verify {
                let report = full_check(&out);
                if let Some(v) = report.violations.first() {
                    rec.error = Some(format!(
                        "verifier: {} violations, first: {v}",
                        report.violations.len()
                    ));
                }
            }
            rec.history_hash = Some(out.history.hash());
            rec.metrics = Some(out.metrics);
        }
        Err(e) => rec.error = Some(e.to_string()),
    }
    rec
}

pub fn summarize(points: &[Point], runs: &[RunRecord]) -> Vec<PointSummary> {
    points
        .iter()
        .map(|p| {
            let mine: Vec<&RunRecord> = runs.iter().filter(|r| r.point == p.index).collect();
            let ok: Vec<&RunMetrics> = mine.iter().filter(|r| r.ok()).filter_map(|r| r.metrics.as_ref()).collect();
            let col = |f: &dyn Fn(&RunMetrics) -> f64| Spread::of(&ok.iter().map(|m| f(m)).collect::<Vec<_>>());
            let total: u64 = ok.iter().map(|m| m.total()).sum();
            let aborted: u64 = ok.iter().map(|m| m.aborted).sum();
            PointSummary {
                point: p.index,
                label: p.label.clone(),
                config: p.config,
                runs: mine.len(),
                failed: mine.len() - ok.len(),
                txn_per_s: col(&|m| m.throughput().txn_per_s),
                committed_per_s: col(&|m| m.throughput().committed_per_s),
                txn_per_s_per_agent: col(&|m| m.throughput().txn_per_s_per_agent),
                abort_rate: col(&|m| m.abort_rate()),
                pooled_abort_rate: (total > 0).then(|| aborted as f64 / total as f64),
            }
        })
        .collect()
}

/// Runs every (point, seed) pair. Failed runs are recorded, not fatal.
pub fn sweep(spec: &SweepSpec) -> Result<SweepResult, SweepError> {
    let points = spec.points()?;
    let jobs: Vec<(&Point, u64)> = points
        .iter()
        .flat_map(|p| spec.seeds.iter().map(move |&s| (p, s)))
        .collect();
    let mut runs: Vec<RunRecord> = jobs
        .par_iter()
        .map(|(p, s)| run_one(p, *s, spec.verify))
        .collect();
    runs.sort_by_key(|r| (r.point, r.seed));
    for r in runs.iter().filter(|r| !r.ok()) {
        log::warn!("point {} seed {}: {}", r.label, r.seed, r.error.as_deref().unwrap_or(""));
    }
    let summaries = summarize(&points, &runs);
    Ok(SweepResult {
        runs,
        points: summaries,
    })
}

impl SweepResult {
    pub fn point(&self, label: &str) -> Option<&PointSummary> {
        self.points.iter().find(|p| p.label == label)
    }

    pub fn runs_of(&self, label: &str) -> impl Iterator<Item = &RunRecord> {
        let label = label.to_string();
        self.runs.iter().filter(move |r| r.label == label)
    }

    /// One row per run: point, label, the engine's metric columns, then
    /// history hash and error.
    pub fn write_runs_csv(&self, w: impl std::io::Write) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["point", "label"];
        header.extend(CSV_HEADER);
        header.extend(["history_hash", "error"]);
        out.write_record(&header)?;
        for r in &self.runs {
            let mut row = vec![r.point.to_string(), r.label.clone()];
            match &r.metrics {
                Some(m) => row.extend(csv_row(&r.config, m)),
                None => {
                    let mut cfg_cols = csv_row(&r.config, &RunMetrics::default());
                    for c in cfg_cols.iter_mut().skip(CONFIG_COLUMNS) {
                        c.clear();
                    }
                    row.extend(cfg_cols);
                }
            }
            row.push(r.history_hash.clone().unwrap_or_default());
            row.push(r.error.clone().unwrap_or_default());
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_aggregate_csv(&self, w: impl std::io::Write) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["point".to_string(), "label".into(), "runs".into(), "failed".into()];
        for m in ["txn_per_s", "committed_per_s", "txn_per_s_per_agent", "abort_rate"] {
            for s in ["min", "avg", "max"] {
                header.push(format!("{m}_{s}"));
            }
        }
        header.push("pooled_abort_rate".into());
        out.write_record(&header)?;
        for p in &self.points {
            let mut row = vec![
                p.point.to_string(),
                p.label.clone(),
                p.runs.to_string(),
                p.failed.to_string(),
            ];
            for (s, prec) in [
                (p.txn_per_s, 1),
                (p.committed_per_s, 1),
                (p.txn_per_s_per_agent, 1),
                (p.abort_rate, 6),
            ] {
                match s {
                    Some(s) => row.extend([s.min, s.avg, s.max].map(|x| format!("{x:.prec$}"))),
                    None => row.extend([String::new(), String::new(), String::new()]),
                }
            }
            row.push(p.pooled_abort_rate.map(|x| format!("{x:.6}")).unwrap_or_default());
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum ReadCsvError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("row {row}: missing or bad column `{column}`")]
    Column { row: usize, column: String },
}

/// Reads per-run CSVs written by [`SweepResult::write_runs_csv`] back into a
/// result. Metrics are rebuilt from the counters the CSV carries, which is
/// enough for every throughput and abort-rate figure. Rows of several files
/// are merged by label.
pub fn read_runs_csv<R: std::io::Read>(readers: impl IntoIterator<Item = R>) -> Result<SweepResult, ReadCsvError> {
    use crate::lock::ResponseKind;
    let mut labels: Vec<String> = Vec::new();
    let mut points: Vec<Point> = Vec::new();
    let mut runs = Vec::new();
    let mut row_no = 0;
    for r in readers {
        let mut rdr = csv::Reader::from_reader(r);
        let headers = rdr.headers()?.clone();
        for rec in rdr.records() {
            let rec = rec?;
            row_no += 1;
            let get = |name: &str| -> Result<&str, ReadCsvError> {
                headers
                    .iter()
                    .position(|h| h == name)
                    .and_then(|i| rec.get(i))
                    .ok_or_else(|| ReadCsvError::Column { row: row_no, column: name.into() })
            };
            fn num<T: std::str::FromStr>(v: &str, row: usize, name: &str) -> Result<T, ReadCsvError> {
                v.parse().map_err(|_| ReadCsvError::Column { row, column: name.into() })
            }
            let n = |name: &str| -> Result<u64, ReadCsvError> { num(get(name)?, row_no, name) };
            let label = get("label")?.to_string();
            let mut cfg = SimConfig::default();
            cfg.topology.txn_agents = n("txn_agents")? as usize;
            cfg.txn.slots = n("txncs")? as usize;
            cfg.topology.channels = n("channels")? as usize;
            cfg.topology.agents_per_channel = n("agents_per_channel")? as usize;
            cfg.lock_agent.table_size = n("table_size")? as usize;
            cfg.txn.timeout = n("timeout")?;
            cfg.freq_mhz = num(get("freq_mhz")?, row_no, "freq_mhz")?;
            cfg.seed = n("seed")?;
            let point = match labels.iter().position(|l| *l == label) {
                Some(i) => i,
                None => {
                    labels.push(label.clone());
                    points.push(Point {
                        index: points.len(),
                        label: label.clone(),
                        config: cfg,
                        workload: WorkloadSpec::default(),
                    });
                    points.len() - 1
                }
            };
            let error = Some(get("error")?).filter(|e| !e.is_empty()).map(str::to_string);
            let metrics = if error.is_none() {
                let mut m = RunMetrics {
                    cycles: n("cycles")?,
                    committed: n("committed")?,
                    aborted: n("aborted")?,
                    aborted_timeout: n("aborted_timeout")?,
                    aborted_denied: n("aborted_denied")?,
                    txn_agents: cfg.topology.txn_agents,
                    freq_mhz: cfg.freq_mhz,
                    ..RunMetrics::default()
                };
                m.responses[ResponseKind::Granted.index()] = n("granted")?;
                m.responses[ResponseKind::Waiting.index()] = n("waiting")?;
                m.responses[ResponseKind::Released.index()] = n("released")?;
                Some(m)
            } else {
                None
            };
            runs.push(RunRecord {
                point,
                label,
                seed: cfg.seed,
                config: cfg,
                metrics,
                history_hash: Some(get("history_hash")?).filter(|h| !h.is_empty()).map(str::to_string),
                error,
            });
        }
    }
    runs.sort_by_key(|r| (r.point, r.seed));
    let summaries = summarize(&points, &runs);
    Ok(SweepResult { runs, points: summaries })
}

// ---- trend expectations ---------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    TxnPerS,
    CommittedPerS,
    TxnPerSPerAgent,
    AbortRate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stat {
    Min,
    Avg,
    Max,
    /// max - min across seeds
    Spread,
    /// Only for abort rate: aborted / attempted summed over seeds.
    Pooled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Quantity {
    pub metric: Metric,
    pub stat: Stat,
}

impl Quantity {
    pub fn new(metric: Metric, stat: Stat) -> Self {
        Self { metric, stat }
    }

    pub fn of(&self, p: &PointSummary) -> Option<f64> {
        let s = match self.metric {
            Metric::TxnPerS => p.txn_per_s,
            Metric::CommittedPerS => p.committed_per_s,
            Metric::TxnPerSPerAgent => p.txn_per_s_per_agent,
            Metric::AbortRate => p.abort_rate,
        };
        match self.stat {
            Stat::Min => s.map(|s| s.min),
            Stat::Avg => s.map(|s| s.avg),
            Stat::Max => s.map(|s| s.max),
            Stat::Spread => s.map(|s| s.width()),
            Stat::Pooled => match self.metric {
                Metric::AbortRate => p.pooled_abort_rate,
                _ => None,
            },
        }
    }

    fn of_run(&self, m: &RunMetrics) -> f64 {
        let t = m.throughput();
        match self.metric {
            Metric::TxnPerS => t.txn_per_s,
            Metric::CommittedPerS => t.committed_per_s,
            Metric::TxnPerSPerAgent => t.txn_per_s_per_agent,
            Metric::AbortRate => m.abort_rate(),
        }
    }
}

impl fmt::Display for Quantity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}.{:?}", self.metric, self.stat)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Expectation {
    /// q(points[i+1]) <= q(points[i]).
    NonIncreasing { name: String, q: Quantity, points: Vec<String> },
    /// Same, but on each seed's own runs instead of the aggregate.
    NonIncreasingPerSeed { name: String, q: Quantity, points: Vec<String> },
    /// q(num) >= ratio * q(den).
    RatioAtLeast { name: String, q: Quantity, num: String, den: String, ratio: f64 },
    /// q(num) <= ratio * q(den).
    RatioAtMost { name: String, q: Quantity, num: String, den: String, ratio: f64 },
    /// q(points[i+1]) >= factor * q(points[i]) for every step.
    ScalingPerStep { name: String, q: Quantity, points: Vec<String>, factor: f64 },
}

impl Expectation {
    pub fn name(&self) -> &str {
        match self {
            Expectation::NonIncreasing { name, .. }
            | Expectation::NonIncreasingPerSeed { name, .. }
            | Expectation::RatioAtLeast { name, .. }
            | Expectation::RatioAtMost { name, .. }
            | Expectation::ScalingPerStep { name, .. } => name,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrendRow {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrendReport {
    pub rows: Vec<TrendRow>,
}

impl TrendReport {
    pub fn all_pass(&self) -> bool {
        self.rows.iter().all(|r| r.pass)
    }
}

impl fmt::Display for TrendReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let w = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(11);
        writeln!(f, "{:<w$}  result  detail", "expectation")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<w$}  {:<6}  {}",
                r.name,
                if r.pass { "PASS" } else { "FAIL" },
                r.detail
            )?;
        }
        Ok(())
    }
}

fn fmt_num(x: f64) -> String {
    if x.abs() >= 1000.0 {
        format!("{x:.0}")
    } else {
        format!("{x:.4}")
    }
}

fn values(result: &SweepResult, q: Quantity, labels: &[String]) -> Result<Vec<f64>, String> {
    labels
        .iter()
        .map(|l| {
            let p = result.point(l).ok_or_else(|| format!("no point `{l}`"))?;
            q.of(p).ok_or_else(|| format!("no successful runs at `{l}`"))
        })
        .collect()
}

fn evaluate(result: &SweepResult, e: &Expectation) -> Result<(bool, String), String> {
    match e {
        Expectation::NonIncreasing { q, points, .. } => {
            let v = values(result, *q, points)?;
            let pass = v.windows(2).all(|w| w[1] <= w[0]);
            let shown: Vec<String> = points
                .iter()
                .zip(&v)
                .map(|(l, x)| format!("{l}={}", fmt_num(*x)))
                .collect();
            Ok((pass, format!("{q}: {}", shown.join(" >= "))))
        }
        Expectation::NonIncreasingPerSeed { q, points, .. } => {
            let mut seeds: Vec<u64> = result.runs.iter().map(|r| r.seed).collect();
            seeds.sort();
            seeds.dedup();
            let mut bad = Vec::new();
            for s in &seeds {
                let mut v = Vec::new();
                for l in points {
                    let r = result
                        .runs_of(l)
                        .find(|r| r.seed == *s)
                        .ok_or_else(|| format!("no run `{l}` seed {s}"))?;
                    let m = r.metrics.as_ref().ok_or_else(|| format!("`{l}` seed {s} failed"))?;
                    v.push(q.of_run(m));
                }
                if !v.windows(2).all(|w| w[1] <= w[0]) {
                    bad.push(*s);
                }
            }
            Ok((
                bad.is_empty(),
                format!("{q}: {} of {} seeds monotone, violating {bad:?}", seeds.len() - bad.len(), seeds.len()),
            ))
        }
        Expectation::RatioAtLeast { q, num, den, ratio, .. }
        | Expectation::RatioAtMost { q, num, den, ratio, .. } => {
            let v = values(result, *q, &[num.clone(), den.clone()])?;
            let at_least = matches!(e, Expectation::RatioAtLeast { .. });
            let pass = if at_least { v[0] >= ratio * v[1] } else { v[0] <= ratio * v[1] };
            let r = if v[1] != 0.0 { v[0] / v[1] } else { f64::INFINITY };
            Ok((
                pass,
                format!(
                    "{q}: {num}={} / {den}={} = {r:.3} (want {} {ratio})",
                    fmt_num(v[0]),
                    fmt_num(v[1]),
                    if at_least { ">=" } else { "<=" }
                ),
            ))
        }
        Expectation::ScalingPerStep { q, points, factor, .. } => {
            let v = values(result, *q, points)?;
            let ratios: Vec<f64> = v.windows(2).map(|w| w[1] / w[0]).collect();
            let pass = ratios.iter().all(|r| *r >= *factor);
            let shown: Vec<String> = ratios.iter().map(|r| format!("{r:.3}")).collect();
            Ok((pass, format!("{q} step ratios [{}] (want >= {factor})", shown.join(", "))))
        }
    }
}

/// Evaluates each expectation against a finished sweep. Missing points or
/// failed runs make the row fail with an explanation.
pub fn trend_report(result: &SweepResult, expectations: &[Expectation]) -> TrendReport {
    TrendReport {
        rows: expectations
            .iter()
            .map(|e| {
                let (pass, detail) = evaluate(result, e).unwrap_or_else(|msg| (false, msg));
                TrendRow {
                    name: e.name().to_string(),
                    pass,
                    detail,
                }
            })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SweepSpec {
        let mut base = SimConfig::default();
        base.txns_per_agent = 10;
        base.topology.txn_agents = 1;
        SweepSpec::new(base, WorkloadSpec { warehouses: 2, ..WorkloadSpec::default() }, vec![0, 1, 2])
    }

    #[test]
    fn labels_parse() {
        let (mut c, mut w) = (SimConfig::default(), WorkloadSpec::default());
        apply_param(&mut c, &mut w, "lock_tables", "2C4L").unwrap();
        apply_param(&mut c, &mut w, "txn_setting", "8A16T").unwrap();
        assert_eq!((c.topology.channels, c.topology.agents_per_channel), (2, 4));
        assert_eq!((c.topology.txn_agents, c.txn.slots), (8, 16));
        assert!(apply_param(&mut c, &mut w, "lock_tables", "2X4L").is_err());
        assert!(matches!(
            apply_param(&mut c, &mut w, "banana", "1"),
            Err(SweepError::UnknownParameter(_))
        ));
    }

    #[test]
    fn empty_axes_is_base_point() {
        let s = tiny();
        let pts = s.points().unwrap();
        assert_eq!(pts.len(), 1);
        assert_eq!(pts[0].label, "base");
        let r = sweep(&s).unwrap();
        assert_eq!(r.runs.len(), 3);
        assert_eq!(r.points[0].failed, 0);
    }

    #[test]
    fn seeds_checked() {
        let mut s = tiny();
        s.seeds = vec![1, 2];
        assert_eq!(s.validate(), Err(SweepError::TooFewSeeds(2)));
        s.seeds = vec![1, 2, 1];
        assert_eq!(s.validate(), Err(SweepError::DuplicateSeed(1)));
    }

    #[test]
    fn grid_is_cartesian_and_sorted() {
        let s = tiny().axis("lock_tables", &["1C1L", "1C2L"]).axis("txncs", &["2", "4"]);
        let r = sweep(&s).unwrap();
        let labels: Vec<&str> = r.points.iter().map(|p| p.label.as_str()).collect();
        assert_eq!(labels, ["1C1L,txncs=2", "1C1L,txncs=4", "1C2L,txncs=2", "1C2L,txncs=4"]);
        let keys: Vec<(usize, u64)> = r.runs.iter().map(|r| (r.point, r.seed)).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        assert_eq!(r.runs.len(), 12);
    }

    #[test]
    fn failed_point_does_not_stop_sweep() {
        let s = tiny().axis("table_size", &["3", "1024"]);
        let r = sweep(&s).unwrap();
        assert_eq!(r.point("table_size=3").unwrap().failed, 3);
        assert_eq!(r.point("table_size=1024").unwrap().failed, 0);
        let mut buf = Vec::new();
        r.write_runs_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 7);
        assert!(text.contains("power of two"));
    }

    #[test]
    fn aggregate_recomputes_from_runs() {
        let s = tiny().axis("txncs", &["2", "8"]);
        let r = sweep(&s).unwrap();
        for p in &r.points {
            let xs: Vec<f64> = r
                .runs_of(&p.label)
                .map(|x| x.metrics.as_ref().unwrap().throughput().txn_per_s)
                .collect();
            let avg = xs.iter().sum::<f64>() / xs.len() as f64;
            assert!((p.txn_per_s.unwrap().avg - avg).abs() < 1e-6);
        }
        let mut a = Vec::new();
        let mut b = Vec::new();
        r.write_aggregate_csv(&mut a).unwrap();
        sweep(&s).unwrap().write_aggregate_csv(&mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn runs_csv_round_trip() {
        let s = tiny().axis("txncs", &["2", "8"]).axis("table_size", &["3", "1024"]);
        let r = sweep(&s).unwrap();
        let mut buf = Vec::new();
        r.write_runs_csv(&mut buf).unwrap();
        let back = read_runs_csv([buf.as_slice()]).unwrap();
        assert_eq!(back.runs.len(), r.runs.len());
        for (a, b) in r.points.iter().zip(&back.points) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.failed, b.failed);
            let (x, y) = (a.txn_per_s.map(|s| s.avg), b.txn_per_s.map(|s| s.avg));
            assert_eq!(x.is_some(), y.is_some());
            if let (Some(x), Some(y)) = (x, y) {
                assert!((x - y).abs() < 1e-6 * x);
            }
            assert_eq!(a.pooled_abort_rate, b.pooled_abort_rate);
        }
    }

    #[test]
    fn trend_rows() {
        let s = tiny().axis("txncs", &["1", "8"]);
        let r = sweep(&s).unwrap();
        let q = Quantity::new(Metric::TxnPerS, Stat::Avg);
        let rep = trend_report(
            &r,
            &[
                Expectation::RatioAtLeast {
                    name: "more slots help".into(),
                    q,
                    num: "txncs=8".into(),
                    den: "txncs=1".into(),
                    ratio: 1.5,
                },
                Expectation::ScalingPerStep {
                    name: "missing".into(),
                    q,
                    points: vec!["txncs=1".into(), "txncs=99".into()],
                    factor: 1.0,
                },
            ],
        );
        assert!(rep.rows[0].pass, "{rep}");
        assert!(!rep.rows[1].pass);
        assert!(rep.to_string().contains("FAIL"));
        assert!(trend_report(&r, &[]).rows.is_empty());
    }
}
