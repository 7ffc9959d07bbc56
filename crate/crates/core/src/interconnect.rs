//! Lock channel hierarchy: an N x M crossbar from transaction agents to lock
//! channels, and a 1 x P fan-out from each channel to its lock agents.
//!
//! Per cycle each transaction agent holds at most one request in its output
//! register; each channel admits at most one of the registers addressed to
//! it, round-robin. Responses travel back over a fixed-latency wire into a
//! bounded per-agent buffer. A lock agent only emits when the addressee has
//! a free buffer credit, otherwise it holds the response and stays busy.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lock::{LockId, LockRequest, LockResponse};
use crate::lock_agent::{LockAgent, LockAgentConfig};

/// 64-bit mixer used for every lock placement decision (the splitmix64
/// finalizer; a bijection on u64).
pub fn mix64(x: u64) -> u64 {
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Size of an all-to-all N x M crossbar: N (1 x M) plus M (N x 1).
pub fn crossbar_size(txn_agents: u64, targets: u64) -> u64 {
    2 * txn_agents * targets
}

/// One N x M crossbar to the channels plus M (1 x P) fan-outs.
pub fn crossbar_size_hier(txn_agents: u64, channels: u64, per_channel: u64) -> u64 {
    crossbar_size(txn_agents, channels) + channels * per_channel
}

pub const MAX_AGENTS_PER_CHANNEL: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TopologyError {
    #[error("{0} must be at least 1")]
    Zero(&'static str),
    #[error("{0} must be a power of two, got {1}")]
    NotPowerOfTwo(&'static str, usize),
    #[error("at most {MAX_AGENTS_PER_CHANNEL} lock agents per channel, got {0}")]
    TooManyAgentsPerChannel(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub txn_agents: usize,
    pub channels: usize,
    pub agents_per_channel: usize,
    pub channel_queue_capacity: usize,
    pub response_buffer_capacity: usize,
    pub wire_latency: u64,
}

impl Default for Topology {
    fn default() -> Self {
        Self {
            txn_agents: 4,
            channels: 4,
            agents_per_channel: 4,
            channel_queue_capacity: 64,
            response_buffer_capacity: 16,
            wire_latency: 1,
        }
    }
}

impl Topology {
    pub fn validate(&self) -> Result<(), TopologyError> {
        for (name, v) in [
            ("txn_agents", self.txn_agents),
            ("channels", self.channels),
            ("agents_per_channel", self.agents_per_channel),
            ("channel_queue_capacity", self.channel_queue_capacity),
            ("response_buffer_capacity", self.response_buffer_capacity),
        ] {
            if v == 0 {
                return Err(TopologyError::Zero(name));
            }
        }
        if self.wire_latency == 0 {
            return Err(TopologyError::Zero("wire_latency"));
        }
        if !self.channels.is_power_of_two() {
            return Err(TopologyError::NotPowerOfTwo("channels", self.channels));
        }
        if !self.agents_per_channel.is_power_of_two() {
            return Err(TopologyError::NotPowerOfTwo(
                "agents_per_channel",
                self.agents_per_channel,
            ));
        }
        if self.agents_per_channel > MAX_AGENTS_PER_CHANNEL {
            return Err(TopologyError::TooManyAgentsPerChannel(self.agents_per_channel));
        }
        Ok(())
    }

    pub fn lock_agents(&self) -> usize {
        self.channels * self.agents_per_channel
    }

    fn channel_bits(&self) -> u32 {
        self.channels.trailing_zeros()
    }

    fn agent_bits(&self) -> u32 {
        self.agents_per_channel.trailing_zeros()
    }

    /// Hash bits consumed before the table index.
    pub fn index_shift(&self) -> u32 {
        self.channel_bits() + self.agent_bits()
    }

    pub fn route(&self, lock_id: LockId, table_size: usize) -> Route {
        let h = mix64(lock_id.0);
        let channel = (h as usize) & (self.channels - 1);
        let agent = ((h >> self.channel_bits()) as usize) & (self.agents_per_channel - 1);
        let index = ((h >> self.index_shift()) as usize) & (table_size - 1);
        Route {
            channel,
            agent,
            index,
        }
    }

    pub fn global_agent(&self, route: &Route) -> usize {
        route.channel * self.agents_per_channel + route.agent
    }
}

pub fn route(lock_id: LockId, topology: &Topology, table_size: usize) -> Route {
    topology.route(lock_id, table_size)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Route {
    pub channel: usize,
    pub agent: usize,
    pub index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoutedRequest {
    pub request: LockRequest,
    pub route: Route,
    pub enqueued_at: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct FabricStats {
    pub admitted: u64,
    pub arbitration_stalls: u64,
    pub queue_full_stalls: u64,
    pub responses_sent: u64,
    pub responses_delivered: u64,
    pub responses_dropped: u64,
    pub credit_stalls: u64,
}

#[derive(Debug, Clone)]
struct Channel {
    rr: usize,
    occupancy: usize,
    queues: Vec<VecDeque<RoutedRequest>>,
}

/// The lock side of the accelerator: channels, their lock agents, and the
/// crossbars that connect them to the transaction agents.
#[derive(Debug, Clone)]
pub struct Fabric {
    topo: Topology,
    table_size: usize,
    agents: Vec<LockAgent>,
    channels: Vec<Channel>,
    ports: Vec<Option<RoutedRequest>>,
    wire: VecDeque<(u64, LockResponse)>,
    in_flight: Vec<usize>,
    buffers: Vec<VecDeque<LockResponse>>,
    stats: FabricStats,
    drop_nth_response: Option<u64>,
}

impl Fabric {
    pub fn new(topo: Topology, agent_cfg: LockAgentConfig) -> Result<Self, TopologyError> {
        topo.validate()?;
        let shift = topo.index_shift();
        Ok(Self {
            topo,
            table_size: agent_cfg.table_size,
            agents: (0..topo.lock_agents())
                .map(|_| LockAgent::new(agent_cfg, shift))
                .collect(),
            channels: (0..topo.channels)
                .map(|_| Channel {
                    rr: 0,
                    occupancy: 0,
                    queues: vec![VecDeque::new(); topo.agents_per_channel],
                })
                .collect(),
            ports: vec![None; topo.txn_agents],
            wire: VecDeque::new(),
            in_flight: vec![0; topo.txn_agents],
            buffers: vec![VecDeque::new(); topo.txn_agents],
            stats: FabricStats::default(),
            drop_nth_response: None,
        })
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    pub fn agents(&self) -> &[LockAgent] {
        &self.agents
    }

    pub fn agents_mut(&mut self) -> &mut [LockAgent] {
        &mut self.agents
    }

    pub fn stats(&self) -> &FabricStats {
        &self.stats
    }

    pub fn route(&self, lock_id: LockId) -> Route {
        self.topo.route(lock_id, self.table_size)
    }

    /// Lock table entry of `lock_id` as `global_agent << 32 | index`.
    pub fn entry_key(&self, lock_id: LockId) -> u64 {
        let r = self.route(lock_id);
        ((self.topo.global_agent(&r) as u64) << 32) | r.index as u64
    }

    pub fn port_free(&self, txn_agent: usize) -> bool {
        self.ports[txn_agent].is_none()
    }

    /// Place a request in the agent's output register. Fails when the
    /// register still holds an unadmitted request.
    pub fn emit(&mut self, txn_agent: usize, request: LockRequest) -> Result<(), LockRequest> {
        if self.ports[txn_agent].is_some() {
            return Err(request);
        }
        let route = self.route(request.lock_id);
        self.ports[txn_agent] = Some(RoutedRequest {
            request,
            route,
            enqueued_at: 0,
        });
        Ok(())
    }

    /// Channel arbitration: each channel admits at most one request per cycle.
    pub fn admit(&mut self, now: u64) {
        let n = self.topo.txn_agents;
        let cap = self.topo.channel_queue_capacity;
        for (c, ch) in self.channels.iter_mut().enumerate() {
            let mut winner = None;
            let mut contenders = 0;
            for k in 0..n {
                let a = (ch.rr + k) % n;
                if matches!(&self.ports[a], Some(r) if r.route.channel == c) {
                    contenders += 1;
                    if winner.is_none() {
                        winner = Some(a);
                    }
                }
            }
            let Some(a) = winner else { continue };
            if ch.occupancy >= cap {
                self.stats.queue_full_stalls += contenders;
                continue;
            }
            let mut r = self.ports[a].take().unwrap();
            r.enqueued_at = now;
            ch.queues[r.route.agent].push_back(r);
            ch.occupancy += 1;
            ch.rr = (a + 1) % n;
            self.stats.admitted += 1;
            self.stats.arbitration_stalls += contenders - 1;
        }
    }

    fn has_credit(&self, txn_agent: usize) -> bool {
        self.buffers[txn_agent].len() + self.in_flight[txn_agent]
            < self.topo.response_buffer_capacity
    }

    /// Lock agents emit due responses (credit permitting), then idle agents
    /// latch the next request queued for them before this cycle.
    pub fn service_lock_agents(&mut self, now: u64) {
        let total = self.agents.len();
        let start = (now as usize) % total;
        for k in 0..total {
            let g = (start + k) % total;
            if let Some(resp) = self.agents[g].next_due(now).copied() {
                let to = resp.to.agent as usize;
                if self.has_credit(to) {
                    self.agents[g].take_due(now);
                    self.send_response(resp, now);
                } else {
                    self.stats.credit_stalls += 1;
                }
            }
            if self.agents[g].is_idle() {
                let (c, a) = (g / self.topo.agents_per_channel, g % self.topo.agents_per_channel);
                let ch = &mut self.channels[c];
                if matches!(ch.queues[a].front(), Some(r) if r.enqueued_at < now) {
                    let r = ch.queues[a].pop_front().unwrap();
                    ch.occupancy -= 1;
                    let ok = self.agents[g].accept(r.request, now);
                    debug_assert!(ok);
                }
            }
        }
    }

    fn send_response(&mut self, resp: LockResponse, now: u64) {
        self.stats.responses_sent += 1;
        if let Some(n) = self.drop_nth_response {
            if n == self.stats.responses_sent {
                self.stats.responses_dropped += 1;
                return;
            }
        }
        self.in_flight[resp.to.agent as usize] += 1;
        self.wire.push_back((now + self.topo.wire_latency, resp));
    }

    /// Move responses that have crossed the wire into their buffers.
    pub fn deliver(&mut self, now: u64) -> usize {
        let mut n = 0;
        while matches!(self.wire.front(), Some((t, _)) if *t <= now) {
            let (_, resp) = self.wire.pop_front().unwrap();
            let a = resp.to.agent as usize;
            self.in_flight[a] -= 1;
            self.buffers[a].push_back(resp);
            self.stats.responses_delivered += 1;
            n += 1;
        }
        n
    }

    pub fn pop_response(&mut self, txn_agent: usize) -> Option<LockResponse> {
        self.buffers[txn_agent].pop_front()
    }

    pub fn has_response(&self, txn_agent: usize) -> bool {
        !self.buffers[txn_agent].is_empty()
    }

    /// One standalone interconnect step: lock agents, wire, then admission.
    /// Returns the responses that reached a buffer this cycle.
    pub fn tick(&mut self, now: u64) -> Vec<LockResponse> {
        self.service_lock_agents(now);
        let before: Vec<usize> = self.buffers.iter().map(|b| b.len()).collect();
        self.deliver(now);
        let delivered = self
            .buffers
            .iter()
            .zip(before)
            .flat_map(|(b, n)| b.iter().skip(n).copied())
            .collect();
        self.admit(now);
        delivered
    }

    /// Nothing queued, in service, or in transit.
    pub fn is_quiet(&self) -> bool {
        self.ports.iter().all(Option::is_none)
            && self.channels.iter().all(|c| c.occupancy == 0)
            && self.agents.iter().all(LockAgent::is_idle)
            && self.wire.is_empty()
            && self.buffers.iter().all(VecDeque::is_empty)
    }

    /// Fault hook: silently lose the `nth` response sent (1-based).
    #[doc(hidden)]
    pub fn inject_drop_response(&mut self, nth: u64) {
        self.drop_nth_response = Some(nth);
    }
}
