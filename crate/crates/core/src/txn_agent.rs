//! Pipelined transaction agent.
//!
//! Each agent owns `slots` transaction registers. Five components work on
//! them independently: the loader, the Get sender, the response receiver,
//! the commit controller and the Release sender. Each component context
//! switches to whichever slot is ready for it, so several transactions are in
//! flight at once. A slot moves through four barriers: fully loaded before
//! the first Get, every lock granted before commit, commit finished before
//! the first Release, every Release acknowledged before the slot is reused.

use std::collections::{HashMap, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::history::{AbortCause, EventKind, HistoryEvent};
use crate::interconnect::Fabric;
use crate::lock::{AccessKind, LockId, LockMode, LockRequest, LockResponse, ResponseKind, SlotRef};
use crate::memory::{Memory, MemoryError};
use crate::metrics::Histogram;

pub const MAX_LOCKS_PER_TXN: usize = 511;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DataAccess {
    pub addr: u64,
    pub len: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LockEntry {
    pub lock_id: LockId,
    pub mode: LockMode,
    pub data: Option<DataAccess>,
}

impl LockEntry {
    pub fn access(&self) -> Option<AccessKind> {
        self.mode.data_access()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TxnDescriptor {
    pub txn_id: u64,
    pub locks: Vec<LockEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DescriptorError {
    #[error("transaction has no locks")]
    Empty,
    #[error("{0} locks exceeds the max size for one txn of {MAX_LOCKS_PER_TXN}")]
    TooManyLocks(usize),
    #[error("lock {0} requests NL")]
    NoLockRequest(usize),
    #[error("lock {0} in mode {1} has no data address")]
    MissingData(usize, LockMode),
    #[error("lock {0} in intent mode {1} carries a data address")]
    UnexpectedData(usize, LockMode),
    #[error("lock {0} has zero-length data access")]
    ZeroLength(usize),
    #[error("lock id {1} appears twice (position {0})")]
    DuplicateLock(usize, LockId),
}

impl TxnDescriptor {
    pub fn validate(&self) -> Result<(), DescriptorError> {
        if self.locks.is_empty() {
            return Err(DescriptorError::Empty);
        }
        if self.locks.len() > MAX_LOCKS_PER_TXN {
            return Err(DescriptorError::TooManyLocks(self.locks.len()));
        }
        let mut seen = std::collections::HashSet::with_capacity(self.locks.len());
        for (i, l) in self.locks.iter().enumerate() {
            if l.mode == LockMode::NL {
                return Err(DescriptorError::NoLockRequest(i));
            }
            match (l.access(), l.data) {
                (Some(_), None) => return Err(DescriptorError::MissingData(i, l.mode)),
                (None, Some(_)) => return Err(DescriptorError::UnexpectedData(i, l.mode)),
                (Some(_), Some(d)) if d.len == 0 => return Err(DescriptorError::ZeroLength(i)),
                _ => {}
            }
            if !seen.insert(l.lock_id) {
                return Err(DescriptorError::DuplicateLock(i, l.lock_id));
            }
        }
        Ok(())
    }

    pub fn data_locks(&self) -> usize {
        self.locks.iter().filter(|l| l.data.is_some()).count()
    }
}

/// Cycle costs of the transaction agent components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TxnCosts {
    pub mem_latency: u64,
    pub chunk_bytes: u64,
    /// Bytes per lock in the on-chip lock list: 8 B lock id, 6 B data
    /// address, 1 B mode, 1 B length in chunks.
    pub desc_entry_bytes: u64,
    pub send_cost: u64,
    pub parse_cost: u64,
    pub commit_access_cost: u64,
}

impl Default for TxnCosts {
    fn default() -> Self {
        Self {
            mem_latency: 36,
            chunk_bytes: 64,
            desc_entry_bytes: 16,
            send_cost: 2,
            parse_cost: 2,
            commit_access_cost: 4,
        }
    }
}

impl TxnCosts {
    pub fn load_cycles(&self, locks: usize) -> u64 {
        let bytes = locks as u64 * self.desc_entry_bytes;
        self.mem_latency + bytes.div_ceil(self.chunk_bytes)
    }

    fn chunks(&self, len: u32) -> u64 {
        (len as u64).div_ceil(self.chunk_bytes).max(1)
    }

    /// First access pays the memory latency; the rest are pipelined behind it.
    pub fn commit_cycles(&self, desc: &TxnDescriptor) -> u64 {
        let mut accesses = desc.locks.iter().filter_map(|l| l.data).peekable();
        if accesses.peek().is_none() {
            return 0;
        }
        self.mem_latency
            + accesses
                .map(|d| self.commit_access_cost + self.chunks(d.len) - 1)
                .sum::<u64>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxnAgentConfig {
    pub slots: usize,
    pub timeout: u64,
    pub costs: TxnCosts,
    pub retry_aborted: bool,
}

impl Default for TxnAgentConfig {
    fn default() -> Self {
        Self {
            slots: 8,
            timeout: 1 << 13,
            costs: TxnCosts::default(),
            retry_aborted: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Stage {
    Empty,
    Loading,
    GetSending,
    AwaitGrants,
    Committing,
    ReleaseSending,
    AwaitReleased,
    Cleanup,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LockStatus {
    NotSent,
    GetSent,
    Waiting,
    Granted,
    ReleaseSent,
    Done,
    AbortedByAgent,
}

#[derive(Debug, Clone, Default)]
pub struct SlotCounters {
    pub sent_gets: usize,
    pub grants: usize,
    pub waitings: usize,
    pub aborts: usize,
    pub sent_releases: usize,
    pub releases_acked: usize,
}

#[derive(Debug, Clone)]
pub struct TxnSlot {
    pub stage: Stage,
    pub generation: u32,
    pub desc: Option<TxnDescriptor>,
    pub status: Vec<LockStatus>,
    pub counters: SlotCounters,
    pub abort: Option<AbortCause>,
    pub timer_start: Option<u64>,
    /// Lock positions with a data access, filled by the Get sender.
    pub data_buffer: Vec<usize>,
    index: HashMap<LockId, usize>,
    sent_at: Vec<u64>,
    next_get: usize,
    next_release: usize,
    ready_at: u64,
    loaded_at: u64,
}

impl TxnSlot {
    fn new() -> Self {
        Self {
            stage: Stage::Empty,
            generation: 0,
            desc: None,
            status: Vec::new(),
            counters: SlotCounters::default(),
            abort: None,
            timer_start: None,
            data_buffer: Vec::new(),
            index: HashMap::new(),
            sent_at: Vec::new(),
            next_get: 0,
            next_release: 0,
            ready_at: 0,
            loaded_at: 0,
        }
    }

    pub fn lock_count(&self) -> usize {
        self.status.len()
    }

    fn all_granted(&self) -> bool {
        self.counters.grants == self.lock_count()
    }

    fn gets_outstanding(&self) -> bool {
        self.status.contains(&LockStatus::GetSent)
    }

    pub fn txn_id(&self) -> Option<u64> {
        self.desc.as_ref().map(|d| d.txn_id)
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct TxnAgentStats {
    pub loaded: u64,
    pub committed: u64,
    pub aborted_timeout: u64,
    pub aborted_denied: u64,
    pub gets_sent: u64,
    pub releases_sent: u64,
    pub timeout_releases_sent: u64,
    pub responses: [u64; 4],
    pub stale_responses: u64,
    pub late_grants: u64,
    pub port_stalls: u64,
    pub txn_latency: Histogram,
    pub response_latency: [Histogram; 4],
    pub reads: u64,
    pub writes: u64,
    /// Cycle of the last cleanup.
    pub finished_at: u64,
}

impl TxnAgentStats {
    pub fn aborted(&self) -> u64 {
        self.aborted_timeout + self.aborted_denied
    }
}

#[derive(Debug, Clone, Default)]
struct Component {
    busy_until: u64,
    rr: usize,
    current: Option<usize>,
}

impl Component {
    fn free(&self, now: u64) -> bool {
        now >= self.busy_until
    }
}

#[derive(Debug, Error)]
pub enum TxnAgentError {
    #[error("txn {txn}: {source}")]
    Memory { txn: u64, source: MemoryError },
}

pub struct TxnAgent {
    id: u16,
    cfg: TxnAgentConfig,
    slots: Vec<TxnSlot>,
    pending: VecDeque<TxnDescriptor>,
    loader: Component,
    get_sender: Component,
    committer: Component,
    release_sender: Component,
    receiver_busy_until: u64,
    receiving: Option<LockResponse>,
    stats: TxnAgentStats,
    events: Vec<HistoryEvent>,
}

impl TxnAgent {
    pub fn new(id: u16, cfg: TxnAgentConfig, work: impl IntoIterator<Item = TxnDescriptor>) -> Self {
        assert!(cfg.slots >= 1, "at least one transaction slot");
        assert!(cfg.timeout > 0, "timeout must be positive");
        Self {
            id,
            cfg,
            slots: (0..cfg.slots).map(|_| TxnSlot::new()).collect(),
            pending: work.into_iter().collect(),
            loader: Component::default(),
            get_sender: Component::default(),
            committer: Component::default(),
            release_sender: Component::default(),
            receiver_busy_until: 0,
            receiving: None,
            stats: TxnAgentStats::default(),
            events: Vec::new(),
        }
    }

    pub fn id(&self) -> u16 {
        self.id
    }

    pub fn slots(&self) -> &[TxnSlot] {
        &self.slots
    }

    pub fn stats(&self) -> &TxnAgentStats {
        &self.stats
    }

    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    pub fn is_done(&self) -> bool {
        self.pending.is_empty()
            && self.receiving.is_none()
            && self.slots.iter().all(|s| s.stage == Stage::Empty)
    }

    pub fn take_events(&mut self) -> Vec<HistoryEvent> {
        std::mem::take(&mut self.events)
    }

    fn slot_ref(&self, slot: usize) -> SlotRef {
        SlotRef::new(self.id, slot as u16, self.slots[slot].generation)
    }

    fn event(&mut self, cycle: u64, txn_id: u64, kind: EventKind) {
        self.events.push(HistoryEvent {
            cycle,
            agent: self.id,
            txn_id,
            kind,
        });
    }

    // ---- receiver -------------------------------------------------------

    /// Response receiver: finishes parsing the current response, then picks
    /// the next one from the buffer. Each response takes `parse_cost` cycles.
    pub fn receive(&mut self, now: u64, fabric: &mut Fabric) {
        if let Some(resp) = self.receiving {
            if now < self.receiver_busy_until {
                return;
            }
            self.receiving = None;
            self.apply_response(resp, now, fabric);
        }
        if let Some(resp) = fabric.pop_response(self.id as usize) {
            self.receiving = Some(resp);
            self.receiver_busy_until = now + self.cfg.costs.parse_cost;
        }
    }

    /// Apply one response to its slot immediately.
    pub fn apply_response(&mut self, resp: LockResponse, now: u64, fabric: &Fabric) {
        let s = resp.to.slot as usize;
        self.stats.responses[resp.kind.index()] += 1;
        let slot = &self.slots[s];
        let Some(&i) = (slot.generation == resp.to.generation && slot.stage != Stage::Empty)
            .then(|| slot.index.get(&resp.lock_id))
            .flatten()
        else {
            self.stats.stale_responses += 1;
            return;
        };
        let txn = slot.txn_id().unwrap();
        let sent_at = slot.sent_at[i];
        self.stats.response_latency[resp.kind.index()].record(now.saturating_sub(sent_at));
        let entry_key = fabric.entry_key(resp.lock_id);

        let slot = &mut self.slots[s];
        match resp.kind {
            ResponseKind::Waiting => {
                if slot.status[i] == LockStatus::GetSent {
                    slot.status[i] = LockStatus::Waiting;
                    slot.counters.waitings += 1;
                }
            }
            ResponseKind::Granted => match slot.status[i] {
                LockStatus::GetSent | LockStatus::Waiting => {
                    slot.status[i] = LockStatus::Granted;
                    slot.counters.grants += 1;
                    let mode = slot.desc.as_ref().unwrap().locks[i].mode;
                    let stage = slot.stage;
                    let ready = slot.abort.is_none() && slot.all_granted();
                    if ready && stage == Stage::AwaitGrants {
                        slot.stage = Stage::Committing;
                    }
                    self.event(
                        now,
                        txn,
                        EventKind::Grant {
                            lock: resp.lock_id,
                            mode,
                            entry: entry_key,
                        },
                    );
                }
                _ => self.stats.late_grants += 1,
            },
            ResponseKind::Aborted => {
                slot.status[i] = LockStatus::AbortedByAgent;
                slot.counters.aborts += 1;
                if slot.abort.is_none() {
                    slot.abort = Some(AbortCause::Denied);
                    if matches!(slot.stage, Stage::GetSending | Stage::AwaitGrants) {
                        slot.stage = Stage::ReleaseSending;
                    }
                }
            }
            ResponseKind::Released => {
                slot.status[i] = LockStatus::Done;
                slot.counters.releases_acked += 1;
                self.event(
                    now,
                    txn,
                    EventKind::Release {
                        lock: resp.lock_id,
                        entry: entry_key,
                    },
                );
                let slot = &self.slots[s];
                if slot.stage == Stage::AwaitReleased
                    && slot.counters.releases_acked == slot.counters.sent_releases
                {
                    self.cleanup(s, now);
                }
            }
        }
    }

    fn cleanup(&mut self, s: usize, now: u64) {
        let slot = &mut self.slots[s];
        slot.stage = Stage::Cleanup;
        let desc = slot.desc.take().unwrap();
        let cause = slot.abort;
        let latency = now - slot.loaded_at;
        slot.stage = Stage::Empty;
        slot.status.clear();
        slot.index.clear();
        slot.sent_at.clear();
        slot.data_buffer.clear();
        slot.timer_start = None;
        slot.abort = None;
        self.stats.txn_latency.record(latency);
        self.stats.finished_at = now;
        match cause {
            None => {
                self.stats.committed += 1;
            }
            Some(c) => {
                match c {
                    AbortCause::Timeout => self.stats.aborted_timeout += 1,
                    AbortCause::Denied => self.stats.aborted_denied += 1,
                }
                self.event(now, desc.txn_id, EventKind::Abort { cause: c });
                if self.cfg.retry_aborted {
                    self.pending.push_back(desc);
                }
            }
        }
    }

    // ---- pipeline components --------------------------------------------

    /// Advance the loader, senders and commit controller by one cycle.
    pub fn advance(
        &mut self,
        now: u64,
        fabric: &mut Fabric,
        memory: &mut Memory,
    ) -> Result<(), TxnAgentError> {
        self.finish_loads(now);
        self.finish_commit(now, fabric, memory)?;
        self.send_releases(now, fabric);
        self.send_gets(now, fabric);
        self.start_commit(now);
        self.load(now);
        Ok(())
    }

    fn finish_loads(&mut self, now: u64) {
        for slot in &mut self.slots {
            if slot.stage == Stage::Loading && now >= slot.ready_at {
                slot.stage = Stage::GetSending;
            }
        }
    }

    /// Task loader: fills the next empty slot. Returns the cycles charged.
    pub fn load(&mut self, now: u64) -> Option<u64> {
        if !self.loader.free(now) || self.pending.is_empty() {
            return None;
        }
        let n = self.slots.len();
        let s = (0..n)
            .map(|k| (self.loader.rr + k) % n)
            .find(|&s| self.slots[s].stage == Stage::Empty)?;
        let desc = self.pending.pop_front().unwrap();
        let cost = self.cfg.costs.load_cycles(desc.locks.len());
        let slot = &mut self.slots[s];
        slot.generation = slot.generation.wrapping_add(1);
        slot.status = vec![LockStatus::NotSent; desc.locks.len()];
        slot.sent_at = vec![0; desc.locks.len()];
        slot.index = desc.locks.iter().enumerate().map(|(i, l)| (l.lock_id, i)).collect();
        slot.counters = SlotCounters::default();
        slot.abort = None;
        slot.timer_start = None;
        slot.data_buffer.clear();
        slot.next_get = 0;
        slot.next_release = 0;
        slot.loaded_at = now;
        slot.ready_at = now + cost;
        slot.stage = Stage::Loading;
        slot.desc = Some(desc);
        self.loader.busy_until = now + cost;
        self.loader.rr = (s + 1) % n;
        self.stats.loaded += 1;
        Some(cost)
    }

    fn pick(comp: &mut Component, slots: &[TxnSlot], ready: impl Fn(&TxnSlot) -> bool) -> Option<usize> {
        if let Some(s) = comp.current {
            if ready(&slots[s]) {
                return Some(s);
            }
            comp.current = None;
        }
        let n = slots.len();
        let s = (0..n).map(|k| (comp.rr + k) % n).find(|&s| ready(&slots[s]))?;
        comp.current = Some(s);
        comp.rr = (s + 1) % n;
        Some(s)
    }

    /// Get sender: one Get per `send_cost` cycles, in descriptor order.
    pub fn send_gets(&mut self, now: u64, fabric: &mut Fabric) -> Option<LockRequest> {
        if !self.get_sender.free(now) {
            return None;
        }
        let s = Self::pick(&mut self.get_sender, &self.slots, |t| {
            t.stage == Stage::GetSending && t.abort.is_none()
        })?;
        if !fabric.port_free(self.id as usize) {
            self.stats.port_stalls += 1;
            return None;
        }
        let who = self.slot_ref(s);
        let slot = &mut self.slots[s];
        let i = slot.next_get;
        let entry = slot.desc.as_ref().unwrap().locks[i];
        let req = LockRequest::get(who, entry.lock_id, entry.mode);
        fabric.emit(self.id as usize, req).expect("port checked free");
        slot.status[i] = LockStatus::GetSent;
        slot.sent_at[i] = now;
        slot.counters.sent_gets += 1;
        if entry.data.is_some() {
            slot.data_buffer.push(i);
        }
        slot.timer_start.get_or_insert(now);
        slot.next_get += 1;
        if slot.next_get == slot.lock_count() {
            slot.stage = if slot.all_granted() {
                Stage::Committing
            } else {
                Stage::AwaitGrants
            };
            self.get_sender.current = None;
        }
        self.get_sender.busy_until = now + self.cfg.costs.send_cost;
        self.stats.gets_sent += 1;
        Some(req)
    }

    fn start_commit(&mut self, now: u64) {
        if !self.committer.free(now) || self.committer.current.is_some() {
            return;
        }
        let n = self.slots.len();
        let Some(s) = (0..n)
            .map(|k| (self.committer.rr + k) % n)
            .find(|&s| self.slots[s].stage == Stage::Committing)
        else {
            return;
        };
        let cost = self.commit_cycles(s);
        self.committer.current = Some(s);
        self.committer.rr = (s + 1) % n;
        self.committer.busy_until = now + cost;
        if cost == 0 {
            // Nothing to read or write: hand straight to the release sender.
            self.committer.current = None;
            self.slots[s].stage = Stage::ReleaseSending;
            let txn = self.slots[s].txn_id().unwrap();
            self.event(now, txn, EventKind::Commit);
        }
    }

    /// Cycles the commit controller spends on slot `s`.
    pub fn commit_cycles(&self, s: usize) -> u64 {
        self.slots[s]
            .desc
            .as_ref()
            .map_or(0, |d| self.cfg.costs.commit_cycles(d))
    }

    fn finish_commit(&mut self, now: u64, fabric: &Fabric, memory: &mut Memory) -> Result<(), TxnAgentError> {
        let Some(s) = self.committer.current else {
            return Ok(());
        };
        if now < self.committer.busy_until {
            return Ok(());
        }
        self.committer.current = None;
        let slot = &self.slots[s];
        debug_assert!(slot.all_granted() && slot.abort.is_none());
        let desc = slot.desc.as_ref().unwrap();
        let txn = desc.txn_id;
        let mut ops = Vec::with_capacity(slot.data_buffer.len());
        for &i in &slot.data_buffer {
            let l = desc.locks[i];
            let d = l.data.unwrap();
            let kind = l.access().unwrap();
            let value = match kind {
                AccessKind::Read => memory
                    .read_version(d.addr, d.len)
                    .map_err(|source| TxnAgentError::Memory { txn, source })?,
                AccessKind::Write => {
                    memory
                        .write_version(d.addr, d.len, txn)
                        .map_err(|source| TxnAgentError::Memory { txn, source })?;
                    txn
                }
            };
            ops.push((l.lock_id, fabric.entry_key(l.lock_id), d.addr, kind, value));
        }
        for (lock, entry, addr, kind, value) in ops {
            let ev = match kind {
                AccessKind::Read => {
                    self.stats.reads += 1;
                    EventKind::Read {
                        lock,
                        entry,
                        addr,
                        observed: value,
                    }
                }
                AccessKind::Write => {
                    self.stats.writes += 1;
                    EventKind::Write { lock, entry, addr, value }
                }
            };
            self.event(now, txn, ev);
        }
        self.event(now, txn, EventKind::Commit);
        self.slots[s].stage = Stage::ReleaseSending;
        Ok(())
    }

    /// Release sender. Locks still waiting for their Get response are held
    /// back until that response arrives, so the Release matches what the
    /// lock agent actually did with the Get.
    pub fn send_releases(&mut self, now: u64, fabric: &mut Fabric) -> Option<LockRequest> {
        if !self.release_sender.free(now) {
            return None;
        }
        let s = Self::pick(&mut self.release_sender, &self.slots, |t| {
            t.stage == Stage::ReleaseSending && !t.gets_outstanding()
        })?;
        // Skip positions that need no Release.
        {
            let slot = &mut self.slots[s];
            while slot.next_release < slot.lock_count()
                && !matches!(
                    slot.status[slot.next_release],
                    LockStatus::Granted | LockStatus::Waiting
                )
            {
                slot.next_release += 1;
            }
            if slot.next_release == slot.lock_count() {
                self.finish_release_sending(s, now);
                return None;
            }
        }
        if !fabric.port_free(self.id as usize) {
            self.stats.port_stalls += 1;
            return None;
        }
        let who = self.slot_ref(s);
        let slot = &mut self.slots[s];
        let i = slot.next_release;
        let entry = slot.desc.as_ref().unwrap().locks[i];
        let timeout = slot.status[i] != LockStatus::Granted;
        let req = LockRequest::release(who, entry.lock_id, entry.mode, timeout);
        fabric.emit(self.id as usize, req).expect("port checked free");
        slot.status[i] = LockStatus::ReleaseSent;
        slot.sent_at[i] = now;
        slot.counters.sent_releases += 1;
        slot.next_release += 1;
        self.release_sender.busy_until = now + self.cfg.costs.send_cost;
        self.stats.releases_sent += 1;
        if timeout {
            self.stats.timeout_releases_sent += 1;
        }
        let done = {
            let slot = &self.slots[s];
            (slot.next_release..slot.lock_count())
                .all(|j| !matches!(slot.status[j], LockStatus::Granted | LockStatus::Waiting))
        };
        if done {
            self.finish_release_sending(s, now);
        }
        Some(req)
    }

    fn finish_release_sending(&mut self, s: usize, now: u64) {
        self.release_sender.current = None;
        let slot = &mut self.slots[s];
        slot.next_release = slot.lock_count();
        slot.stage = Stage::AwaitReleased;
        if slot.counters.releases_acked == slot.counters.sent_releases {
            self.cleanup(s, now);
        }
    }

    // ---- timers ----------------------------------------------------------

    /// True when the slot's timer has expired without every lock granted;
    /// the slot is then switched to the abort path.
    pub fn check_timeout(&mut self, s: usize, now: u64) -> bool {
        let timeout = self.cfg.timeout;
        let slot = &mut self.slots[s];
        if !matches!(slot.stage, Stage::GetSending | Stage::AwaitGrants) || slot.abort.is_some() {
            return false;
        }
        let Some(start) = slot.timer_start else {
            return false;
        };
        if now - start < timeout || slot.all_granted() {
            return false;
        }
        slot.abort = Some(AbortCause::Timeout);
        slot.stage = Stage::ReleaseSending;
        if self.get_sender.current == Some(s) {
            self.get_sender.current = None;
        }
        true
    }

    pub fn check_timeouts(&mut self, now: u64) -> usize {
        (0..self.slots.len()).filter(|&s| self.check_timeout(s, now)).count()
    }

    /// `None` when the agent may act on the next cycle. Otherwise the next
    /// cycle at which anything is scheduled (`u64::MAX` for never). Only
    /// meaningful while no responses are pending for this agent.
    pub fn idle_until(&self) -> Option<u64> {
        let busy = self.slots.iter().any(|s| match s.stage {
            Stage::GetSending => s.abort.is_none(),
            Stage::ReleaseSending | Stage::Committing | Stage::Cleanup => true,
            _ => false,
        });
        if busy {
            return None;
        }
        let mut t = self.next_wakeup().unwrap_or(u64::MAX);
        if !self.pending.is_empty() && self.slots.iter().any(|s| s.stage == Stage::Empty) {
            t = t.min(self.loader.busy_until);
        }
        Some(t)
    }

    /// Earliest cycle at which some internal timer or component finishes.
    pub fn next_wakeup(&self) -> Option<u64> {
        let mut t: Option<u64> = None;
        let mut put = |c: u64| t = Some(t.map_or(c, |x: u64| x.min(c)));
        if self.receiving.is_some() {
            put(self.receiver_busy_until);
        }
        if self.committer.current.is_some() {
            put(self.committer.busy_until);
        }
        for s in &self.slots {
            if s.stage == Stage::Loading {
                put(s.ready_at);
            }
            if let (Some(start), Stage::GetSending | Stage::AwaitGrants, None) = (s.timer_start, s.stage, s.abort) {
                put(start + self.cfg.timeout);
            }
        }
        t
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interconnect::Topology;
    use crate::lock_agent::LockAgentConfig;

    fn desc(id: u64, modes: &[LockMode]) -> TxnDescriptor {
        TxnDescriptor {
            txn_id: id,
            locks: modes
                .iter()
                .enumerate()
                .map(|(i, &m)| LockEntry {
                    lock_id: LockId(id * 1000 + i as u64),
                    mode: m,
                    data: m.data_access().map(|_| DataAccess {
                        addr: (id * 1000 + i as u64) * 64,
                        len: 64,
                    }),
                })
                .collect(),
        }
    }

    fn fabric(n: usize) -> Fabric {
        Fabric::new(
            Topology {
                txn_agents: n,
                channels: 1,
                agents_per_channel: 1,
                ..Topology::default()
            },
            LockAgentConfig {
                table_size: 1 << 12,
                ..LockAgentConfig::default()
            },
        )
        .unwrap()
    }

    fn cfg(slots: usize) -> TxnAgentConfig {
        TxnAgentConfig {
            slots,
            ..TxnAgentConfig::default()
        }
    }

    fn resp(agent: &TxnAgent, s: usize, lock: LockId, kind: ResponseKind) -> LockResponse {
        LockResponse {
            to: SlotRef::new(agent.id, s as u16, agent.slots[s].generation),
            lock_id: lock,
            mode: LockMode::S,
            kind,
        }
    }

    #[test]
    fn load_costs() {
        let c = TxnCosts::default();
        assert_eq!(c.load_cycles(4), 37);
        assert_eq!(c.load_cycles(511), 36 + (511u64 * 16).div_ceil(64));
        let mut a = TxnAgent::new(0, cfg(1), vec![desc(1, &[LockMode::S; 4])]);
        assert_eq!(a.load(0), Some(37));
        assert_eq!(a.slots[0].stage, Stage::Loading);
        let mut idle = TxnAgent::new(0, cfg(1), vec![]);
        assert_eq!(idle.load(0), None);
        assert_eq!(idle.slots[0].stage, Stage::Empty);
    }

    #[test]
    fn commit_costs() {
        let c = TxnCosts::default();
        assert_eq!(c.commit_cycles(&desc(1, &[LockMode::IS, LockMode::IX])), 0);
        assert_eq!(c.commit_cycles(&desc(1, &[LockMode::IX, LockMode::X])), 40);
        assert_eq!(c.commit_cycles(&desc(1, &[LockMode::S, LockMode::X, LockMode::SIX])), 36 + 12);
    }

    #[test]
    fn descriptor_validation() {
        assert!(desc(1, &[LockMode::IS, LockMode::S]).validate().is_ok());
        assert_eq!(desc(1, &[]).validate(), Err(DescriptorError::Empty));
        assert_eq!(
            desc(1, &vec![LockMode::IS; 512]).validate(),
            Err(DescriptorError::TooManyLocks(512))
        );
        assert_eq!(
            desc(1, &[LockMode::NL]).validate(),
            Err(DescriptorError::NoLockRequest(0))
        );
        let mut d = desc(1, &[LockMode::X]);
        d.locks[0].data = None;
        assert_eq!(d.validate(), Err(DescriptorError::MissingData(0, LockMode::X)));
        let mut d = desc(1, &[LockMode::IS, LockMode::IX]);
        d.locks[1].lock_id = d.locks[0].lock_id;
        assert!(matches!(d.validate(), Err(DescriptorError::DuplicateLock(1, _))));
    }

    fn loaded(modes: &[LockMode]) -> (TxnAgent, Fabric) {
        let mut a = TxnAgent::new(0, cfg(1), vec![desc(1, modes)]);
        a.load(0);
        a.finish_loads(1000);
        (a, fabric(1))
    }

    #[test]
    fn gets_go_out_in_order_with_data_buffer() {
        let modes = [LockMode::IX, LockMode::X, LockMode::S];
        let (mut a, mut f) = loaded(&modes);
        let mut sent = Vec::new();
        for t in 1000..1010 {
            if let Some(r) = a.send_gets(t, &mut f) {
                sent.push((t, r.lock_id.0));
            }
            f.admit(t);
        }
        assert_eq!(sent, vec![(1000, 1000), (1002, 1001), (1004, 1002)]);
        assert_eq!(a.slots[0].data_buffer, vec![1, 2]);
        assert_eq!(a.slots[0].timer_start, Some(1000));
        assert_eq!(a.slots[0].stage, Stage::AwaitGrants);
    }

    #[test]
    fn back_pressure_delays_gets() {
        let modes = [LockMode::IS, LockMode::IS, LockMode::IS];
        let (mut a, mut f) = loaded(&modes);
        let mut sent = Vec::new();
        for t in 1000..1012 {
            if let Some(r) = a.send_gets(t, &mut f) {
                sent.push((t, r.lock_id.0));
            }
            // the channel refuses anything during 1002..1004
            if !(1002..1004).contains(&t) {
                f.admit(t);
            }
        }
        // second Get is emitted at 1002 but sits in the port for two cycles
        assert_eq!(sent, vec![(1000, 1000), (1002, 1001), (1005, 1002)]);
        assert!(a.stats().port_stalls > 0);
    }

    #[test]
    fn receive_transitions() {
        let modes = [LockMode::S, LockMode::X];
        let (mut a, mut f) = loaded(&modes);
        a.send_gets(1000, &mut f);
        f.admit(1000);
        a.send_gets(1002, &mut f);
        let f = f;
        let l0 = LockId(1000);
        let l1 = LockId(1001);
        a.apply_response(resp(&a, 0, l0, ResponseKind::Waiting), 1010, &f);
        assert_eq!(a.slots[0].status[0], LockStatus::Waiting);
        a.apply_response(resp(&a, 0, l0, ResponseKind::Granted), 1011, &f);
        assert_eq!(a.slots[0].status[0], LockStatus::Granted);
        assert_eq!(a.slots[0].stage, Stage::AwaitGrants);
        a.apply_response(resp(&a, 0, l1, ResponseKind::Granted), 1012, &f);
        assert_eq!(a.slots[0].stage, Stage::Committing);
    }

    #[test]
    fn aborted_response_skips_commit() {
        let modes = [LockMode::S, LockMode::X, LockMode::S];
        let (mut a, mut f) = loaded(&modes);
        for t in [1000, 1002, 1004] {
            a.send_gets(t, &mut f);
            f.admit(t);
        }
        let f = f;
        a.apply_response(resp(&a, 0, LockId(1000), ResponseKind::Granted), 1010, &f);
        a.apply_response(resp(&a, 0, LockId(1001), ResponseKind::Aborted), 1011, &f);
        assert_eq!(a.slots[0].stage, Stage::ReleaseSending);
        assert_eq!(a.slots[0].abort, Some(AbortCause::Denied));
        a.apply_response(resp(&a, 0, LockId(1002), ResponseKind::Granted), 1012, &f);
        let mut f2 = fabric(1);
        let mut rel = Vec::new();
        for t in 1020..1030 {
            if let Some(r) = a.send_releases(t, &mut f2) {
                rel.push((r.lock_id.0, r.timeout_release()));
            }
            f2.admit(t);
        }
        assert_eq!(rel, vec![(1000, false), (1002, false)]);
        assert_eq!(a.slots[0].stage, Stage::AwaitReleased);
    }

    #[test]
    fn timeout_path_flags_waiting_releases() {
        let modes = [LockMode::S, LockMode::S, LockMode::X];
        let (mut a, mut f) = loaded(&modes);
        for t in [1000, 1002, 1004] {
            a.send_gets(t, &mut f);
            f.admit(t);
        }
        let f = f;
        a.apply_response(resp(&a, 0, LockId(1000), ResponseKind::Granted), 1010, &f);
        a.apply_response(resp(&a, 0, LockId(1001), ResponseKind::Granted), 1010, &f);
        a.apply_response(resp(&a, 0, LockId(1002), ResponseKind::Waiting), 1010, &f);
        let limit = 1000 + (1 << 13);
        assert!(!a.check_timeout(0, limit - 1));
        assert!(a.check_timeout(0, limit));
        assert_eq!(a.slots[0].abort, Some(AbortCause::Timeout));
        let mut f2 = fabric(1);
        let mut rel = Vec::new();
        for t in limit..limit + 10 {
            if let Some(r) = a.send_releases(t, &mut f2) {
                rel.push((r.lock_id.0, r.timeout_release()));
            }
            f2.admit(t);
        }
        assert_eq!(rel, vec![(1000, false), (1001, false), (1002, true)]);
    }

    #[test]
    fn fully_granted_never_times_out() {
        let (mut a, mut f) = loaded(&[LockMode::S]);
        a.send_gets(1000, &mut f);
        let f = f;
        a.apply_response(resp(&a, 0, LockId(1000), ResponseKind::Granted), 1000 + 8191, &f);
        assert!(!a.check_timeout(0, 1000 + 8192));
        let mut idle = TxnAgent::new(0, cfg(1), vec![]);
        assert!(!idle.check_timeout(0, 1 << 20));
    }

    #[test]
    fn stale_generation_is_dropped() {
        let (mut a, f) = loaded(&[LockMode::S]);
        let mut r = resp(&a, 0, LockId(1000), ResponseKind::Granted);
        r.to.generation += 7;
        a.apply_response(r, 2000, &f);
        assert_eq!(a.stats().stale_responses, 1);
        assert_eq!(a.slots[0].status[0], LockStatus::NotSent);
    }

    #[test]
    fn components_work_on_different_slots_same_cycle() {
        let mut a = TxnAgent::new(
            0,
            cfg(2),
            vec![desc(1, &[LockMode::X]), desc(2, &[LockMode::IS, LockMode::IS])],
        );
        let mut f = fabric(1);
        let mut mem = Memory::new(1 << 40, 36);
        a.load(0);
        a.loader.busy_until = 0;
        a.load(0);
        a.finish_loads(100);
        // slot 0 fully granted -> Committing; slot 1 still sending
        a.send_gets(100, &mut f);
        f.admit(100);
        let ff = fabric(1);
        a.apply_response(resp(&a, 0, LockId(1000), ResponseKind::Granted), 101, &ff);
        assert_eq!(a.slots[0].stage, Stage::Committing);
        assert_eq!(a.slots[1].stage, Stage::GetSending);
        a.advance(102, &mut f, &mut mem).unwrap();
        assert_eq!(a.committer.current, Some(0));
        assert_eq!(a.slots[1].counters.sent_gets, 1);
    }

    #[test]
    fn single_slot_runs_stages_sequentially() {
        let mut a = TxnAgent::new(0, cfg(1), vec![desc(1, &[LockMode::S]), desc(2, &[LockMode::S])]);
        a.load(0);
        a.loader.busy_until = 0;
        assert_eq!(a.load(1), None);
    }
}
