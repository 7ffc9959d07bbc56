//! Cycle-stepped model of a hardware lock manager with hierarchical lock
//! modes, a channelled interconnect, and pipelined transaction agents.

pub mod dse;
pub mod engine;
pub mod history;
pub mod interconnect;
pub mod lock;
pub mod lock_agent;
pub mod memory;
pub mod metrics;
pub mod txn_agent;
pub mod verifier;
pub mod workload;

pub use engine::{run, RunOutput, SimConfig, SimError, Simulation};
pub use history::HistoryLog;
pub use lock::{compatible, group_join, LockId, LockMode};
pub use metrics::{throughput, RunMetrics, Throughput};
pub use txn_agent::TxnDescriptor;
