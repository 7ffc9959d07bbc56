//! Config file schema. Every section and key is optional; anything not set
//! keeps the library default. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use txnaccel::dse::{Axis, Expectation};
use txnaccel::workload::{Mix, WorkloadSpec};
use txnaccel::SimConfig;

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemSection {
    pub channels: Option<usize>,
    pub agents_per_channel: Option<usize>,
    pub txn_agents: Option<usize>,
    pub txncs: Option<usize>,
    pub table_size: Option<usize>,
    pub pool_size: Option<usize>,
    pub search_limit: Option<usize>,
    pub max_chain: Option<usize>,
    pub timeout_cycles: Option<u64>,
    pub mem_latency_cycles: Option<u64>,
    pub freq_mhz: Option<f64>,
    pub txns_per_agent: Option<usize>,
    pub channel_queue_capacity: Option<usize>,
    pub response_buffer_capacity: Option<usize>,
    pub wire_latency_cycles: Option<u64>,
    pub retry_aborted: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSection {
    pub warehouses: Option<usize>,
    pub skew: Option<f64>,
    pub seed: Option<u64>,
    pub mix: Option<Mix>,
    pub order_lines: Option<(u32, u32)>,
    pub scan_rows: Option<(u32, u32)>,
    /// Replay this trace instead of generating one.
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub system: SystemSection,
    pub workload: WorkloadSection,
    pub output: OutputSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub seeds: Vec<u64>,
    pub verify: bool,
    pub axes: Vec<Axis>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepFile {
    pub system: SystemSection,
    pub workload: WorkloadSection,
    pub output: OutputSection,
    pub sweep: SweepSection,
    pub expect: Vec<Expectation>,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

impl SystemSection {
    pub fn apply(&self, c: &mut SimConfig) {
        set(&mut c.topology.channels, self.channels);
        set(&mut c.topology.agents_per_channel, self.agents_per_channel);
        set(&mut c.topology.txn_agents, self.txn_agents);
        set(&mut c.topology.channel_queue_capacity, self.channel_queue_capacity);
        set(&mut c.topology.response_buffer_capacity, self.response_buffer_capacity);
        set(&mut c.topology.wire_latency, self.wire_latency_cycles);
        set(&mut c.txn.slots, self.txncs);
        set(&mut c.txn.timeout, self.timeout_cycles);
        set(&mut c.txn.costs.mem_latency, self.mem_latency_cycles);
        set(&mut c.txn.retry_aborted, self.retry_aborted);
        set(&mut c.lock_agent.table_size, self.table_size);
        set(&mut c.lock_agent.pool_size, self.pool_size);
        set(&mut c.lock_agent.search_limit, self.search_limit);
        set(&mut c.lock_agent.max_chain, self.max_chain);
        set(&mut c.freq_mhz, self.freq_mhz);
        set(&mut c.txns_per_agent, self.txns_per_agent);
    }
}

impl WorkloadSection {
    pub fn apply(&self, w: &mut WorkloadSpec) {
        set(&mut w.warehouses, self.warehouses);
        set(&mut w.skew, self.skew);
        set(&mut w.seed, self.seed);
        set(&mut w.mix, self.mix);
        set(&mut w.order_lines, self.order_lines);
        set(&mut w.scan_rows, self.scan_rows);
    }

    /// Trace path resolved against the config file's directory.
    pub fn trace_path(&self, config_path: &Path) -> Option<PathBuf> {
        self.trace.as_ref().map(|t| match config_path.parent() {
            Some(dir) if t.is_relative() => dir.join(t),
            _ => t.clone(),
        })
    }
}

pub fn parse<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T, toml::de::Error> {
    toml::from_str(text)
}
