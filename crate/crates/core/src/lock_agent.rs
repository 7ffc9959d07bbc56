//! Lock Agent: a direct-mapped, keyless lock status table plus a shared pool
//! of linked-list waiting-queue entries, driven by a sequential FSM.
//!
//! The agent decides each request at acceptance and schedules its responses
//! at fixed cycle offsets. Occupancy model (in cycles, `search_limit` = L):
//!
//! | path                                  | cycles                      |
//! |---------------------------------------|-----------------------------|
//! | Get granted                           | 3                           |
//! | Get queued                            | 3 + chain + probes + 1      |
//! | Get aborted, chain already full       | 3 + chain                   |
//! | Get aborted, no free pool slot        | 3 + chain + L               |
//! | Release, normal                       | 3                           |
//! | Release, timeout, found at position p | 3 + p + 1                   |
//! | Release, timeout, not in chain        | 3 + chain + 1, then normal  |
//! | each grant popped after a release     | +3 after the previous one   |
//!
//! The three base cycles are Wait Request, Read Lock Table and Lock Resp.

use std::collections::VecDeque;

use serde::Serialize;

use crate::interconnect::mix64;
use crate::lock::{LockMode, LockRequest, LockResponse, RequestKind, ResponseKind};

pub const BASE_CYCLES: u64 = 3;
pub const POP_GRANT_CYCLES: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
pub struct LockAgentConfig {
    pub table_size: usize,
    pub pool_size: usize,
    pub search_limit: usize,
    pub max_chain: usize,
}

impl Default for LockAgentConfig {
    fn default() -> Self {
        Self {
            table_size: 1 << 16,
            pool_size: 1 << 12,
            search_limit: 8,
            max_chain: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct TableEntry {
    pub mode: LockMode,
    pub owners: u32,
    pub waitq_head: Option<u32>,
}

impl TableEntry {
    pub fn entry_valid(&self) -> bool {
        self.mode != LockMode::NL || self.owners > 0 || self.waitq_head.is_some()
    }

    pub fn waitq_valid(&self) -> bool {
        self.waitq_head.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct WaitQEntry {
    pub request: LockRequest,
    pub next: Option<u32>,
    pub valid: bool,
}

/// One response produced by serving a request, `offset` cycles after the
/// previous response (the first one is relative to acceptance).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Scheduled {
    pub response: LockResponse,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Service {
    pub responses: Vec<Scheduled>,
}

impl Service {
    fn single(response: LockResponse, occupancy: u64) -> Self {
        Self {
            responses: vec![Scheduled {
                response,
                offset: occupancy,
            }],
        }
    }

    pub fn primary(&self) -> &LockResponse {
        &self.responses[0].response
    }

    /// Cycles until the primary response leaves the agent.
    pub fn occupancy(&self) -> u64 {
        self.responses[0].offset
    }

    /// Cycles until the agent is free again.
    pub fn total_cycles(&self) -> u64 {
        self.responses.iter().map(|s| s.offset).sum()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LockAgentStats {
    pub accepted: u64,
    pub gets: u64,
    pub releases: u64,
    pub direct_grants: u64,
    pub pop_grants: u64,
    pub waits: u64,
    pub aborts_chain_full: u64,
    pub aborts_pool: u64,
    pub owner_releases: u64,
    pub waitq_deletions: u64,
    pub spurious_releases: u64,
    pub responses: [u64; 4],
}

impl LockAgentStats {
    pub fn aborts(&self) -> u64 {
        self.aborts_chain_full + self.aborts_pool
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct DrainReport {
    pub busy_entries: Vec<(usize, TableEntry)>,
    pub valid_pool_entries: Vec<(usize, WaitQEntry)>,
}

impl DrainReport {
    pub fn is_drained(&self) -> bool {
        self.busy_entries.is_empty() && self.valid_pool_entries.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct LockAgent {
    cfg: LockAgentConfig,
    index_shift: u32,
    table: Vec<TableEntry>,
    pool: Vec<Option<WaitQEntry>>,
    probe_cursor: usize,
    outbox: VecDeque<(LockResponse, u64)>,
    stats: LockAgentStats,
    leak_next_delete: bool,
}

impl LockAgent {
    /// `index_shift` is the number of low hash bits already consumed by
    /// channel and agent selection.
    pub fn new(cfg: LockAgentConfig, index_shift: u32) -> Self {
        assert!(cfg.table_size.is_power_of_two(), "table size must be a power of two");
        assert!(cfg.pool_size.is_power_of_two(), "pool size must be a power of two");
        assert!(cfg.search_limit >= 1 && cfg.max_chain >= 1);
        Self {
            cfg,
            index_shift,
            table: vec![TableEntry::default(); cfg.table_size],
            pool: vec![None; cfg.pool_size],
            probe_cursor: 0,
            outbox: VecDeque::new(),
            stats: LockAgentStats::default(),
            leak_next_delete: false,
        }
    }

    pub fn config(&self) -> &LockAgentConfig {
        &self.cfg
    }

    pub fn stats(&self) -> &LockAgentStats {
        &self.stats
    }

    pub fn table_index(&self, request: &LockRequest) -> usize {
        ((mix64(request.lock_id.0) >> self.index_shift) as usize) & (self.cfg.table_size - 1)
    }

    pub fn entry(&self, index: usize) -> &TableEntry {
        &self.table[index]
    }

    pub fn chain(&self, index: usize) -> Vec<LockRequest> {
        let mut out = Vec::new();
        let mut cur = self.table[index].waitq_head;
        while let Some(p) = cur {
            let e = self.pool[p as usize].as_ref().expect("chain links a free pool slot");
            out.push(e.request);
            cur = e.next;
        }
        out
    }

    pub fn chain_len(&self, index: usize) -> usize {
        let mut n = 0;
        let mut cur = self.table[index].waitq_head;
        while let Some(p) = cur {
            n += 1;
            debug_assert!(n <= self.cfg.pool_size, "waitQ chain cycle");
            cur = self.pool[p as usize].as_ref().unwrap().next;
        }
        n
    }

    pub fn is_idle(&self) -> bool {
        self.outbox.is_empty()
    }

    /// Latch `request` if the agent is free. Responses become available
    /// through [`LockAgent::next_due`] at their scheduled cycles.
    pub fn accept(&mut self, request: LockRequest, now: u64) -> bool {
        if !self.is_idle() {
            return false;
        }
        let service = self.serve(request);
        let mut due = now;
        for s in service.responses {
            due += s.offset;
            self.outbox.push_back((s.response, due));
        }
        true
    }

    /// Response scheduled for emission at or before `now`, if any.
    pub fn next_due(&self, now: u64) -> Option<&LockResponse> {
        match self.outbox.front() {
            Some((r, due)) if *due <= now => Some(r),
            _ => None,
        }
    }

    /// Emit the due response at `now`. When it leaves late (back-pressure),
    /// the responses queued behind it slide by the same amount.
    pub fn take_due(&mut self, now: u64) -> Option<LockResponse> {
        let (resp, due) = *self.outbox.front()?;
        if due > now {
            return None;
        }
        self.outbox.pop_front();
        let slip = now - due;
        if slip > 0 {
            for (_, d) in self.outbox.iter_mut() {
                *d += slip;
            }
        }
        self.stats.responses[resp.kind.index()] += 1;
        Some(resp)
    }

    /// Decide a request and update the table immediately.
    pub fn serve(&mut self, request: LockRequest) -> Service {
        self.stats.accepted += 1;
        match request.kind {
            RequestKind::Get => self.serve_get(request),
            RequestKind::Release { timeout } => self.serve_release(request, timeout),
        }
    }

    fn respond(request: &LockRequest, kind: ResponseKind) -> LockResponse {
        LockResponse {
            to: request.requester,
            lock_id: request.lock_id,
            mode: request.mode,
            kind,
        }
    }

    fn serve_get(&mut self, request: LockRequest) -> Service {
        self.stats.gets += 1;
        let idx = self.table_index(&request);
        let entry = self.table[idx];

        if entry.owners == 0 {
            debug_assert!(!entry.waitq_valid());
            self.table[idx] = TableEntry {
                mode: request.mode,
                owners: 1,
                waitq_head: None,
            };
            self.stats.direct_grants += 1;
            return Service::single(Self::respond(&request, ResponseKind::Granted), BASE_CYCLES);
        }

        // Waiters block later arrivals even when compatible with the holders.
        if !entry.waitq_valid() && request.mode.compatible_with(entry.mode) {
            let e = &mut self.table[idx];
            e.owners += 1;
            e.mode = e.mode.join(request.mode);
            self.stats.direct_grants += 1;
            return Service::single(Self::respond(&request, ResponseKind::Granted), BASE_CYCLES);
        }

        // Walk to the tail.
        let mut tail = None;
        let mut steps = 0u64;
        let mut cur = entry.waitq_head;
        while let Some(p) = cur {
            steps += 1;
            tail = Some(p);
            cur = self.pool[p as usize].as_ref().unwrap().next;
        }
        if steps as usize >= self.cfg.max_chain {
            self.stats.aborts_chain_full += 1;
            return Service::single(
                Self::respond(&request, ResponseKind::Aborted),
                BASE_CYCLES + steps,
            );
        }

        let mask = self.cfg.pool_size - 1;
        let mut found = None;
        for k in 0..self.cfg.search_limit {
            let slot = (self.probe_cursor + k) & mask;
            if self.pool[slot].is_none() {
                found = Some((slot, k as u64 + 1));
                break;
            }
        }
        let Some((slot, probes)) = found else {
            self.probe_cursor = (self.probe_cursor + self.cfg.search_limit) & mask;
            self.stats.aborts_pool += 1;
            return Service::single(
                Self::respond(&request, ResponseKind::Aborted),
                BASE_CYCLES + steps + self.cfg.search_limit as u64,
            );
        };
        self.probe_cursor = (slot + 1) & mask;
        self.pool[slot] = Some(WaitQEntry {
            request,
            next: None,
            valid: true,
        });
        match tail {
            Some(t) => self.pool[t as usize].as_mut().unwrap().next = Some(slot as u32),
            None => self.table[idx].waitq_head = Some(slot as u32),
        }
        self.stats.waits += 1;
        Service::single(
            Self::respond(&request, ResponseKind::Waiting),
            BASE_CYCLES + steps + probes + 1,
        )
    }

    fn free_slot(&mut self, slot: u32) {
        if self.leak_next_delete {
            // Fault hook: unlink but keep the slot marked valid.
            self.leak_next_delete = false;
            if let Some(e) = self.pool[slot as usize].as_mut() {
                e.next = None;
            }
            return;
        }
        self.pool[slot as usize] = None;
    }

    fn serve_release(&mut self, request: LockRequest, timeout: bool) -> Service {
        self.stats.releases += 1;
        let idx = self.table_index(&request);
        let mut occupancy = BASE_CYCLES;

        if timeout && self.table[idx].waitq_valid() {
            let mut prev: Option<u32> = None;
            let mut cur = self.table[idx].waitq_head;
            let mut position = 0u64;
            while let Some(p) = cur {
                position += 1;
                let e = *self.pool[p as usize].as_ref().unwrap();
                if e.request.requester == request.requester && e.request.lock_id == request.lock_id {
                    match prev {
                        Some(q) => self.pool[q as usize].as_mut().unwrap().next = e.next,
                        None => self.table[idx].waitq_head = e.next,
                    }
                    self.free_slot(p);
                    self.stats.waitq_deletions += 1;
                    return Service::single(
                        Self::respond(&request, ResponseKind::Released),
                        BASE_CYCLES + position + 1,
                    );
                }
                prev = Some(p);
                cur = e.next;
            }
            // Not queued: the grant raced the timeout. Release as an owner.
            occupancy = BASE_CYCLES + position + 1;
        }

        let released = Self::respond(&request, ResponseKind::Released);
        let entry = self.table[idx];
        if entry.owners == 0 {
            self.stats.spurious_releases += 1;
            return Service::single(released, occupancy);
        }
        self.stats.owner_releases += 1;
        if entry.owners > 1 {
            // Group mode is left as is.
            self.table[idx].owners -= 1;
            return Service::single(released, occupancy);
        }
        self.table[idx].owners = 0;
        self.table[idx].mode = LockMode::NL;
        let mut responses = vec![Scheduled {
            response: released,
            offset: occupancy,
        }];

        // Pop the head unconditionally, then the compatible run behind it.
        while let Some(head) = self.table[idx].waitq_head {
            let e = *self.pool[head as usize].as_ref().unwrap();
            let cur_mode = self.table[idx].mode;
            if self.table[idx].owners > 0 && !e.request.mode.compatible_with(cur_mode) {
                break;
            }
            let t = &mut self.table[idx];
            t.owners += 1;
            t.mode = cur_mode.join(e.request.mode);
            t.waitq_head = e.next;
            self.free_slot(head);
            self.stats.pop_grants += 1;
            responses.push(Scheduled {
                response: Self::respond(&e.request, ResponseKind::Granted),
                offset: POP_GRANT_CYCLES,
            });
        }
        Service { responses }
    }

    pub fn drain_check(&self) -> DrainReport {
        DrainReport {
            busy_entries: self
                .table
                .iter()
                .enumerate()
                .filter(|(_, e)| e.entry_valid())
                .map(|(i, e)| (i, *e))
                .collect(),
            valid_pool_entries: self
                .pool
                .iter()
                .enumerate()
                .filter_map(|(i, e)| e.map(|e| (i, e)))
                .collect(),
        }
    }

    /// JSON dump of every non-empty table entry and occupied pool slot.
    pub fn dump_json(&self) -> serde_json::Value {
        serde_json::to_value(self.drain_check()).expect("drain report serializes")
    }

    pub fn pool_in_use(&self) -> usize {
        self.pool.iter().filter(|e| e.is_some()).count()
    }

    #[doc(hidden)]
    pub fn inject_leak_on_next_delete(&mut self) {
        self.leak_next_delete = true;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lock::{LockId, SlotRef};
    use LockMode::*;

    fn who(n: u16) -> SlotRef {
        SlotRef::new(0, n, 0)
    }

    fn agent() -> LockAgent {
        LockAgent::new(LockAgentConfig::default(), 0)
    }

    fn small_agent(pool: usize) -> LockAgent {
        LockAgent::new(
            LockAgentConfig {
                table_size: 1 << 10,
                pool_size: pool,
                search_limit: 8,
                max_chain: 8,
            },
            0,
        )
    }

    const L: LockId = LockId(7);

    #[test]
    fn grant_on_empty_entry() {
        let mut a = agent();
        let s = a.serve(LockRequest::get(who(1), L, X));
        assert_eq!(s.primary().kind, ResponseKind::Granted);
        assert_eq!(s.occupancy(), 3);
    }

    #[test]
    fn shared_grants_share_entry() {
        let mut a = agent();
        a.serve(LockRequest::get(who(1), L, S));
        let s = a.serve(LockRequest::get(who(2), L, S));
        assert_eq!(s.primary().kind, ResponseKind::Granted);
        let idx = a.table_index(&LockRequest::get(who(2), L, S));
        assert_eq!(a.entry(idx).owners, 2);
        assert_eq!(a.entry(idx).mode, S);
    }

    #[test]
    fn conflicting_get_waits_five_cycles() {
        let mut a = agent();
        a.serve(LockRequest::get(who(1), L, S));
        let s = a.serve(LockRequest::get(who(2), L, X));
        assert_eq!(s.primary().kind, ResponseKind::Waiting);
        assert_eq!(s.occupancy(), 5);
    }

    #[test]
    fn full_chain_aborts() {
        let mut a = agent();
        a.serve(LockRequest::get(who(0), L, S));
        for i in 1..=8 {
            let s = a.serve(LockRequest::get(who(i), L, X));
            assert_eq!(s.primary().kind, ResponseKind::Waiting);
            // tail walk grows by one per queued entry
            assert_eq!(s.occupancy(), 3 + (i as u64 - 1) + 1 + 1);
        }
        let s = a.serve(LockRequest::get(who(9), L, X));
        assert_eq!(s.primary().kind, ResponseKind::Aborted);
        assert_eq!(s.occupancy(), 11);
    }

    #[test]
    fn pool_exhaustion_aborts_after_search_limit() {
        // 8-entry pool shared by many locks: fill it, then one more waiter.
        let mut a = small_agent(8);
        let mut locks = Vec::new();
        let mut id = 0u64;
        while locks.len() < 9 {
            id += 1;
            let r = LockRequest::get(who(0), LockId(id), X);
            let idx = a.table_index(&r);
            if locks.iter().all(|(_, i)| *i != idx) {
                locks.push((LockId(id), idx));
            }
        }
        for (l, _) in &locks {
            a.serve(LockRequest::get(who(0), *l, X));
        }
        for (l, _) in &locks[..8] {
            let s = a.serve(LockRequest::get(who(1), *l, X));
            assert_eq!(s.primary().kind, ResponseKind::Waiting);
        }
        let s = a.serve(LockRequest::get(who(1), locks[8].0, X));
        assert_eq!(s.primary().kind, ResponseKind::Aborted);
        assert_eq!(s.occupancy(), 3 + 8);
        assert_eq!(a.stats().aborts_pool, 1);
    }

    #[test]
    fn release_shared_decrements() {
        let mut a = agent();
        a.serve(LockRequest::get(who(1), L, S));
        a.serve(LockRequest::get(who(2), L, S));
        let s = a.serve(LockRequest::release(who(1), L, S, false));
        assert_eq!(s.primary().kind, ResponseKind::Released);
        assert_eq!(s.occupancy(), 3);
        assert_eq!(s.responses.len(), 1);
        let idx = a.table_index(&LockRequest::get(who(1), L, S));
        assert_eq!(a.entry(idx).owners, 1);
    }

    #[test]
    fn release_pops_compatible_prefix() {
        let mut a = agent();
        a.serve(LockRequest::get(who(0), L, X));
        a.serve(LockRequest::get(who(1), L, S));
        a.serve(LockRequest::get(who(2), L, S));
        a.serve(LockRequest::get(who(3), L, X));
        let s = a.serve(LockRequest::release(who(0), L, X, false));
        let kinds: Vec<_> = s.responses.iter().map(|r| (r.response.kind, r.response.to.slot, r.offset)).collect();
        assert_eq!(
            kinds,
            vec![
                (ResponseKind::Released, 0, 3),
                (ResponseKind::Granted, 1, 3),
                (ResponseKind::Granted, 2, 3),
            ]
        );
        let chain = a.chain(a.table_index(&LockRequest::get(who(0), L, X)));
        assert_eq!(chain.len(), 1);
        assert_eq!(chain[0].requester, who(3));
    }

    #[test]
    fn timeout_release_deletes_waiter() {
        let mut a = agent();
        a.serve(LockRequest::get(who(0), L, X));
        a.serve(LockRequest::get(who(1), L, S));
        let s = a.serve(LockRequest::release(who(1), L, S, true));
        assert_eq!(s.primary().kind, ResponseKind::Released);
        assert_eq!(s.occupancy(), 5);
        let idx = a.table_index(&LockRequest::get(who(0), L, X));
        assert!(!a.entry(idx).waitq_valid());
        assert_eq!(a.entry(idx).owners, 1);
        assert_eq!(a.pool_in_use(), 0);
    }

    #[test]
    fn timeout_release_of_granted_lock_falls_through() {
        let mut a = agent();
        a.serve(LockRequest::get(who(0), L, S));
        a.serve(LockRequest::get(who(1), L, X));
        // who(0) times out although granted; the waiter must be popped.
        let s = a.serve(LockRequest::release(who(0), L, S, true));
        assert_eq!(s.responses.len(), 2);
        assert_eq!(s.occupancy(), 3 + 1 + 1);
        assert_eq!(s.responses[1].response.kind, ResponseKind::Granted);
        assert_eq!(s.responses[1].response.to, who(1));
    }

    #[test]
    fn spurious_release_is_counted() {
        let mut a = agent();
        let s = a.serve(LockRequest::release(who(0), L, X, false));
        assert_eq!(s.primary().kind, ResponseKind::Released);
        assert_eq!(a.stats().spurious_releases, 1);
        assert!(a.drain_check().is_drained());
    }

    #[test]
    fn queued_request_blocks_compatible_latecomer() {
        let mut a = agent();
        for (i, m) in [S, S, X, S].into_iter().enumerate() {
            let s = a.serve(LockRequest::get(who(i as u16), L, m));
            let expect = if i < 2 { ResponseKind::Granted } else { ResponseKind::Waiting };
            assert_eq!(s.primary().kind, expect);
        }
    }

    #[test]
    fn drain_reports() {
        let mut a = agent();
        assert!(a.drain_check().is_drained());
        a.serve(LockRequest::get(who(0), L, IX));
        assert_eq!(a.drain_check().busy_entries.len(), 1);
        a.serve(LockRequest::release(who(0), L, IX, false));
        assert!(a.drain_check().is_drained());
        let json = a.dump_json();
        assert_eq!(json["busy_entries"].as_array().unwrap().len(), 0);
    }

    #[test]
    fn leak_hook_shows_in_drain() {
        let mut a = agent();
        a.serve(LockRequest::get(who(0), L, X));
        a.serve(LockRequest::get(who(1), L, X));
        a.inject_leak_on_next_delete();
        a.serve(LockRequest::release(who(0), L, X, false));
        a.serve(LockRequest::release(who(1), L, X, false));
        let r = a.drain_check();
        assert!(r.busy_entries.is_empty());
        assert_eq!(r.valid_pool_entries.len(), 1);
    }

    #[test]
    fn accept_is_single_occupancy() {
        let mut a = agent();
        assert!(a.accept(LockRequest::get(who(0), L, S), 10));
        assert!(!a.accept(LockRequest::get(who(1), LockId(99), S), 11));
        assert!(a.next_due(12).is_none());
        assert_eq!(a.take_due(13).unwrap().kind, ResponseKind::Granted);
        assert!(a.accept(LockRequest::get(who(1), LockId(99), S), 13));
    }

    #[test]
    fn late_emission_shifts_pop_grants() {
        let mut a = agent();
        a.serve(LockRequest::get(who(0), L, X));
        a.serve(LockRequest::get(who(1), L, S));
        assert!(a.accept(LockRequest::release(who(0), L, X, false), 0));
        assert!(a.next_due(2).is_none());
        // held for two cycles by back-pressure
        assert_eq!(a.take_due(5).unwrap().kind, ResponseKind::Released);
        assert!(a.take_due(7).is_none());
        assert_eq!(a.take_due(8).unwrap().kind, ResponseKind::Granted);
        assert!(a.is_idle());
    }
}
