//! Global cycle-stepped engine.
//!
//! Every cycle runs the same six phases in the same order:
//!
//! 1. lock agents emit due responses and latch their next request
//! 2. the response network delivers into the transaction agents' buffers
//! 3. transaction agents parse responses
//! 4. transaction agents load, send, and commit
//! 5. channels admit requests from the transaction agents' output registers
//! 6. transaction timers are checked
//!
//! Within a phase, transaction agents go in index order. History events are
//! appended per cycle in agent order, so a log is a pure function of the
//! configuration and the workload.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::history::HistoryLog;
use crate::interconnect::{Fabric, FabricStats, Topology, TopologyError};
use crate::lock_agent::{DrainReport, LockAgentConfig, LockAgentStats};
use crate::memory::Memory;
use crate::metrics::RunMetrics;
use crate::txn_agent::{DescriptorError, TxnAgent, TxnAgentConfig, TxnAgentError, TxnAgentStats, TxnDescriptor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub topology: Topology,
    pub lock_agent: LockAgentConfig,
    pub txn: TxnAgentConfig,
    pub freq_mhz: f64,
    pub txns_per_agent: usize,
    pub memory_span: u64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            topology: Topology::default(),
            lock_agent: LockAgentConfig::default(),
            txn: TxnAgentConfig::default(),
            freq_mhz: 200.0,
            txns_per_agent: 400,
            memory_span: 1 << 48,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("{0} must be at least 1")]
    Zero(&'static str),
    #[error("{0} must be a power of two, got {1}")]
    NotPowerOfTwo(&'static str, u64),
    #[error("clock frequency must be positive, got {0}")]
    Frequency(f64),
    #[error("max chain {0} exceeds pool size {1}")]
    ChainLongerThanPool(usize, usize),
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.topology.validate()?;
        let la = &self.lock_agent;
        for (name, v) in [("table size", la.table_size), ("pool size", la.pool_size)] {
            if v == 0 {
                return Err(ConfigError::Zero(name));
            }
            if !v.is_power_of_two() {
                return Err(ConfigError::NotPowerOfTwo(name, v as u64));
            }
        }
        for (name, v) in [
            ("search limit", la.search_limit as u64),
            ("max chain", la.max_chain as u64),
            ("txn slots", self.txn.slots as u64),
            ("timeout", self.txn.timeout),
            ("memory latency", self.txn.costs.mem_latency),
            ("chunk size", self.txn.costs.chunk_bytes),
            ("descriptor entry size", self.txn.costs.desc_entry_bytes),
            ("send cost", self.txn.costs.send_cost),
            ("parse cost", self.txn.costs.parse_cost),
            ("memory span", self.memory_span),
        ] {
            if v == 0 {
                return Err(ConfigError::Zero(name));
            }
        }
        if la.max_chain > la.pool_size {
            return Err(ConfigError::ChainLongerThanPool(la.max_chain, la.pool_size));
        }
        if !(self.freq_mhz.is_finite() && self.freq_mhz > 0.0) {
            return Err(ConfigError::Frequency(self.freq_mhz));
        }
        Ok(())
    }

    /// Total transactions in a generated workload.
    pub fn total_txns(&self) -> usize {
        self.topology.txn_agents * self.txns_per_agent
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(#[from] ConfigError),
    #[error("invalid transaction {txn}: {source}")]
    Descriptor { txn: u64, source: DescriptorError },
    #[error("livelock: no progress between cycle {since} and cycle {cycle}; {pending} txns unfinished")]
    Livelock { cycle: u64, since: u64, pending: usize },
    #[error(transparent)]
    TxnAgent(#[from] TxnAgentError),
}

/// Final state of a run, kept for audits.
#[derive(Debug, Clone, Serialize)]
pub struct FinalState {
    pub drain: Vec<DrainReport>,
    pub lock_agents: Vec<LockAgentStats>,
    pub txn_agents: Vec<TxnAgentStats>,
    pub fabric: FabricStats,
    pub busy_slots: usize,
    pub pending_txns: usize,
    pub workload_txns: usize,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub metrics: RunMetrics,
    pub history: HistoryLog,
    pub state: FinalState,
}

pub struct Simulation {
    cfg: SimConfig,
    fabric: Fabric,
    agents: Vec<TxnAgent>,
    memory: Memory,
    history: HistoryLog,
    now: u64,
    end: Option<u64>,
    workload_txns: usize,
    lock_requests: usize,
}

impl Simulation {
    /// Validates the configuration and every descriptor, then deals the
    /// workload round-robin across the transaction agents.
    pub fn new(cfg: SimConfig, workload: &[TxnDescriptor]) -> Result<Self, SimError> {
        cfg.validate()?;
        for d in workload {
            d.validate().map_err(|source| SimError::Descriptor { txn: d.txn_id, source })?;
        }
        let fabric = Fabric::new(cfg.topology, cfg.lock_agent).map_err(ConfigError::from)?;
        let n = cfg.topology.txn_agents;
        let agents = (0..n)
            .map(|a| {
                let mine = workload.iter().skip(a).step_by(n).cloned();
                TxnAgent::new(a as u16, cfg.txn, mine)
            })
            .collect();
        Ok(Self {
            cfg,
            fabric,
            agents,
            memory: Memory::new(cfg.memory_span, cfg.txn.costs.mem_latency),
            history: HistoryLog::new(),
            now: 0,
            end: None,
            workload_txns: workload.len(),
            lock_requests: workload.iter().map(|d| d.locks.len()).sum(),
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.cfg
    }

    pub fn fabric(&self) -> &Fabric {
        &self.fabric
    }

    pub fn fabric_mut(&mut self) -> &mut Fabric {
        &mut self.fabric
    }

    pub fn txn_agents(&self) -> &[TxnAgent] {
        &self.agents
    }

    pub fn memory(&self) -> &Memory {
        &self.memory
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn is_done(&self) -> bool {
        self.agents.iter().all(TxnAgent::is_done) && self.fabric.is_quiet()
    }

    /// Runs one cycle. Returns whether anything observable happened.
    pub fn step(&mut self) -> Result<bool, SimError> {
        let now = self.now;
        let before = self.progress_marker();
        self.fabric.service_lock_agents(now);
        self.fabric.deliver(now);
        for a in &mut self.agents {
            a.receive(now, &mut self.fabric);
        }
        for a in &mut self.agents {
            a.advance(now, &mut self.fabric, &mut self.memory)?;
        }
        self.fabric.admit(now);
        for a in &mut self.agents {
            a.check_timeouts(now);
        }
        let mut logged = false;
        for a in &mut self.agents {
            for ev in a.take_events() {
                self.history.push(ev);
                logged = true;
            }
        }
        self.now += 1;
        Ok(logged || self.progress_marker() != before)
    }

    fn progress_marker(&self) -> (u64, u64, u64, u64) {
        let s = self.fabric.stats();
        let loaded = self.agents.iter().map(|a| a.stats().loaded).sum();
        let resp = self.agents.iter().map(|a| a.stats().responses.iter().sum::<u64>()).sum();
        (s.admitted, s.responses_delivered, loaded, resp)
    }

    /// Cycle the whole system can jump to when nothing will happen before it.
    fn skip_target(&self) -> Option<u64> {
        if !self.fabric.is_quiet() {
            return None;
        }
        let mut t = u64::MAX;
        for a in &self.agents {
            t = t.min(a.idle_until()?);
        }
        (t > self.now).then_some(t)
    }

    /// Steps until every transaction is cleaned up. Fails with a livelock
    /// diagnostic after `4 × timeout` cycles without progress.
    pub fn run_to_end(&mut self) -> Result<(), SimError> {
        let guard = self.cfg.txn.timeout.saturating_mul(4);
        let mut last_progress = self.now;
        while !self.is_done() {
            if self.step()? {
                last_progress = self.now;
                continue;
            }
            if let Some(t) = self.skip_target() {
                self.now = t.min(last_progress.saturating_add(guard) + 1);
            }
            if self.now - last_progress > guard {
                return Err(SimError::Livelock {
                    cycle: self.now,
                    since: last_progress,
                    pending: self.unfinished(),
                });
            }
        }
        self.end.get_or_insert(self.now);
        Ok(())
    }

    fn unfinished(&self) -> usize {
        self.agents
            .iter()
            .map(|a| a.pending() + a.slots().iter().filter(|s| s.desc.is_some()).count())
            .sum()
    }

    pub fn metrics(&self) -> RunMetrics {
        let mut m = RunMetrics {
            // The last cleanup happens in cycle `now - 1`, so the run spans `now` cycles.
            cycles: self.end.unwrap_or(self.now),
            txn_agents: self.agents.len(),
            freq_mhz: self.cfg.freq_mhz,
            ..RunMetrics::default()
        };
        for a in &self.agents {
            let s = a.stats();
            m.committed += s.committed;
            m.aborted_timeout += s.aborted_timeout;
            m.aborted_denied += s.aborted_denied;
            m.txn_latency.merge(&s.txn_latency);
            for k in 0..4 {
                m.responses[k] += s.responses[k];
                m.response_latency[k].merge(&s.response_latency[k]);
            }
            m.stale_responses += s.stale_responses;
            m.gets_sent += s.gets_sent;
            m.releases_sent += s.releases_sent;
        }
        m.aborted = m.aborted_timeout + m.aborted_denied;
        m.locks_served = self.fabric.agents().iter().map(|a| a.stats().accepted).collect();
        m.spurious_releases = self.fabric.agents().iter().map(|a| a.stats().spurious_releases).sum();
        if self.workload_txns > 0 {
            m.lock_requests_per_txn = self.lock_requests as f64 / self.workload_txns as f64;
        }
        m
    }

    pub fn final_state(&self) -> FinalState {
        FinalState {
            drain: self.fabric.agents().iter().map(|a| a.drain_check()).collect(),
            lock_agents: self.fabric.agents().iter().map(|a| a.stats().clone()).collect(),
            txn_agents: self.agents.iter().map(|a| a.stats().clone()).collect(),
            fabric: self.fabric.stats().clone(),
            busy_slots: self
                .agents
                .iter()
                .flat_map(|a| a.slots())
                .filter(|s| s.desc.is_some())
                .count(),
            pending_txns: self.agents.iter().map(TxnAgent::pending).sum(),
            workload_txns: self.workload_txns,
        }
    }

    /// Snapshot of metrics, history and final state. Works on unfinished
    /// runs too, so failed runs can still be audited.
    pub fn output(&self) -> RunOutput {
        RunOutput {
            metrics: self.metrics(),
            history: self.history.clone(),
            state: self.final_state(),
        }
    }

    pub fn into_output(self) -> RunOutput {
        let metrics = self.metrics();
        let state = self.final_state();
        RunOutput {
            metrics,
            history: self.history,
            state,
        }
    }
}

/// Runs `workload` to completion on a fresh system.
pub fn run(config: &SimConfig, workload: &[TxnDescriptor]) -> Result<RunOutput, SimError> {
    let mut sim = Simulation::new(*config, workload)?;
    sim.run_to_end()?;
    Ok(sim.into_output())
}

/// Column order of [`csv_row`]. The first eight columns echo the configuration.
pub const CSV_HEADER: [&str; 21] = [
    "txn_agents",
    "txncs",
    "channels",
    "agents_per_channel",
    "table_size",
    "timeout",
    "freq_mhz",
    "seed",
    "cycles",
    "committed",
    "aborted",
    "aborted_timeout",
    "aborted_denied",
    "abort_rate",
    "txn_per_s",
    "committed_per_s",
    "txn_per_s_per_agent",
    "lock_per_s",
    "granted",
    "waiting",
    "released",
];

pub fn csv_row(cfg: &SimConfig, m: &RunMetrics) -> Vec<String> {
    use crate::lock::ResponseKind::*;
    let t = m.throughput();
    vec![
        cfg.topology.txn_agents.to_string(),
        cfg.txn.slots.to_string(),
        cfg.topology.channels.to_string(),
        cfg.topology.agents_per_channel.to_string(),
        cfg.lock_agent.table_size.to_string(),
        cfg.txn.timeout.to_string(),
        cfg.freq_mhz.to_string(),
        cfg.seed.to_string(),
        m.cycles.to_string(),
        m.committed.to_string(),
        m.aborted.to_string(),
        m.aborted_timeout.to_string(),
        m.aborted_denied.to_string(),
        format!("{:.6}", m.abort_rate()),
        format!("{:.1}", t.txn_per_s),
        format!("{:.1}", t.committed_per_s),
        format!("{:.1}", t.txn_per_s_per_agent),
        format!("{:.1}", t.lock_per_s),
        m.response_count(Granted).to_string(),
        m.response_count(Waiting).to_string(),
        m.response_count(Released).to_string(),
    ]
}

pub fn write_metrics_csv(
    w: impl std::io::Write,
    rows: &[(SimConfig, RunMetrics)],
) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CSV_HEADER)?;
    for (cfg, m) in rows {
        out.write_record(csv_row(cfg, m))?;
    }
    out.flush()?;
    Ok(())
}

/// Metrics plus the configuration that produced them, for the JSON detail file.
pub fn metrics_json(cfg: &SimConfig, m: &RunMetrics) -> serde_json::Value {
    serde_json::json!({
        "config": cfg,
        "metrics": m,
        "throughput": m.throughput(),
        "abort_rate": m.abort_rate(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lock::{LockId, LockMode};
    use crate::lock_agent::BASE_CYCLES;
    use crate::txn_agent::{DataAccess, LockEntry};

    fn one_lock(id: u64, mode: LockMode) -> TxnDescriptor {
        TxnDescriptor {
            txn_id: id,
            locks: vec![LockEntry {
                lock_id: LockId(id),
                mode,
                data: mode.data_access().map(|_| DataAccess { addr: id * 64, len: 64 }),
            }],
        }
    }

    #[test]
    fn single_txn_closed_form() {
        let cfg = SimConfig::default();
        let out = run(&cfg, &[one_lock(1, LockMode::X)]).unwrap();
        let c = cfg.txn.costs;
        let wire = cfg.topology.wire_latency;
        // request sits in the channel queue for one cycle before the agent latches it
        let round_trip = 1 + BASE_CYCLES + wire + c.parse_cost;
        let expect = c.load_cycles(1) + round_trip + c.commit_cycles(&one_lock(1, LockMode::X)) + round_trip + 1;
        assert_eq!(expect, 92);
        assert_eq!(out.metrics.cycles, expect);
        assert_eq!(out.metrics.committed, 1);
        assert_eq!(out.metrics.txn_latency.max, Some(expect - 1));
    }

    #[test]
    fn empty_workload() {
        let out = run(&SimConfig::default(), &[]).unwrap();
        assert_eq!(out.metrics.cycles, 0);
        assert_eq!(out.metrics.total(), 0);
        assert!(out.history.is_empty());
    }

    #[test]
    fn config_validation() {
        let mut c = SimConfig::default();
        c.lock_agent.table_size = 3;
        assert!(matches!(c.validate(), Err(ConfigError::NotPowerOfTwo("table size", 3))));
        let mut c = SimConfig::default();
        c.txn.slots = 0;
        assert!(matches!(c.validate(), Err(ConfigError::Zero("txn slots"))));
        let mut c = SimConfig::default();
        c.freq_mhz = 0.0;
        assert!(c.validate().is_err());
        let mut c = SimConfig::default();
        c.topology.channels = 3;
        assert!(matches!(c.validate(), Err(ConfigError::Topology(_))));
    }

    #[test]
    fn rejects_invalid_descriptors() {
        let bad = TxnDescriptor { txn_id: 9, locks: vec![] };
        assert!(matches!(
            run(&SimConfig::default(), &[bad]),
            Err(SimError::Descriptor { txn: 9, .. })
        ));
    }

    #[test]
    fn conflicting_writers_both_commit() {
        let mut a = one_lock(1, LockMode::X);
        let mut b = one_lock(2, LockMode::X);
        b.locks[0] = a.locks[0];
        a.locks[0].data = Some(DataAccess { addr: 64, len: 64 });
        let out = run(&SimConfig::default(), &[a, b]).unwrap();
        assert_eq!(out.metrics.committed, 2);
        assert!(out.metrics.response_count(crate::lock::ResponseKind::Waiting) >= 1);
        assert!(out.state.drain.iter().all(DrainReport::is_drained));
    }

    #[test]
    fn csv_has_header_and_row() {
        let cfg = SimConfig::default();
        let out = run(&cfg, &[one_lock(1, LockMode::S)]).unwrap();
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &[(cfg, out.metrics)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].split(',').count(), CSV_HEADER.len());
        assert_eq!(lines[1].split(',').count(), CSV_HEADER.len());
    }
}
