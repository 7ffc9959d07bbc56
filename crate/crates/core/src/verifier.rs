//! Correctness oracles for finished runs.
//!
//! * [`check_serializable`] builds the conflict graph of committed
//!   transactions at lock-table-entry granularity and looks for a cycle.
//! * [`replay_visibility`] checks that every committed read saw the value of
//!   the last committed write before it.
//! * [`ReferenceLockManager`] is an unbounded, map-based lock manager with the
//!   same decision rules as the lock agent. [`decision_equivalence`] replays a
//!   micro trace through both and reports the first divergence.
//! * [`audit`] checks drain, message conservation, owner balance and that no
//!   aborted transaction wrote anything.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet, VecDeque};
use std::fmt;

use petgraph::algo::tarjan_scc;
use petgraph::graphmap::DiGraphMap;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::engine::RunOutput;
use crate::history::{EventKind, HistoryLog};
use crate::lock::{LockId, LockMode, LockRequest, LockResponse, RequestKind, ResponseKind, SlotRef};
use crate::lock_agent::{LockAgent, LockAgentConfig};

// ---- serializability ------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Verdict {
    pub serializable: bool,
    pub committed: usize,
    pub edges: usize,
    /// Shortest cycle found, as txn ids in edge order.
    pub cycle: Option<Vec<u64>>,
}

#[derive(Default)]
struct EntryState {
    last_writer: Option<u64>,
    readers: Vec<u64>,
}

/// Conflict graph over committed transactions. Edges follow log order of
/// the data operations on each lock table entry.
pub fn conflict_graph(history: &HistoryLog) -> DiGraphMap<u64, ()> {
    let committed: HashSet<u64> = history
        .events()
        .iter()
        .filter(|e| e.kind == EventKind::Commit)
        .map(|e| e.txn_id)
        .collect();
    let mut g = DiGraphMap::new();
    for &t in &committed {
        g.add_node(t);
    }
    let mut entries: HashMap<u64, EntryState> = HashMap::new();
    for ev in history.events() {
        if !committed.contains(&ev.txn_id) {
            continue;
        }
        let t = ev.txn_id;
        match ev.kind {
            EventKind::Read { entry, .. } => {
                let st = entries.entry(entry).or_default();
                if let Some(w) = st.last_writer.filter(|&w| w != t) {
                    g.add_edge(w, t, ());
                }
                st.readers.push(t);
            }
            EventKind::Write { entry, .. } => {
                let st = entries.entry(entry).or_default();
                if let Some(w) = st.last_writer.filter(|&w| w != t) {
                    g.add_edge(w, t, ());
                }
                for &r in &st.readers {
                    if r != t {
                        g.add_edge(r, t, ());
                    }
                }
                st.readers.clear();
                st.last_writer = Some(t);
            }
            _ => {}
        }
    }
    g
}

pub fn check_serializable(history: &HistoryLog) -> Verdict {
    let g = conflict_graph(history);
    let cycle = shortest_cycle(&g);
    Verdict {
        serializable: cycle.is_none(),
        committed: g.node_count(),
        edges: g.edge_count(),
        cycle,
    }
}

fn shortest_cycle(g: &DiGraphMap<u64, ()>) -> Option<Vec<u64>> {
    let mut best: Option<Vec<u64>> = None;
    for scc in tarjan_scc(g) {
        if scc.len() < 2 {
            continue;
        }
        let members: HashSet<u64> = scc.iter().copied().collect();
        for &start in &scc {
            if let Some(c) = bfs_back(g, start, &members) {
                if best.as_ref().is_none_or(|b| c.len() < b.len()) {
                    best = Some(c);
                }
            }
        }
    }
    best
}

// Shortest path start -> ... -> start inside one component.
fn bfs_back(g: &DiGraphMap<u64, ()>, start: u64, members: &HashSet<u64>) -> Option<Vec<u64>> {
    let mut parent: HashMap<u64, u64> = HashMap::new();
    let mut queue = VecDeque::from([start]);
    while let Some(u) = queue.pop_front() {
        for v in g.neighbors(u) {
            if !members.contains(&v) {
                continue;
            }
            if v == start {
                let mut path = vec![u];
                let mut cur = u;
                while cur != start {
                    cur = parent[&cur];
                    path.push(cur);
                }
                path.reverse();
                return Some(path);
            }
            if v != start && !parent.contains_key(&v) {
                parent.insert(v, u);
                queue.push_back(v);
            }
        }
    }
    None
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StaleRead {
    pub txn: u64,
    pub addr: u64,
    pub observed: u64,
    pub expected: u64,
}

/// Every committed read must observe the last committed write to its
/// address, or zero for untouched memory.
pub fn replay_visibility(history: &HistoryLog) -> Vec<StaleRead> {
    let mut mem: HashMap<u64, u64> = HashMap::new();
    let mut bad = Vec::new();
    for ev in history.events() {
        match ev.kind {
            EventKind::Read { addr, observed, .. } => {
                let expected = mem.get(&addr).copied().unwrap_or(0);
                if expected != observed {
                    bad.push(StaleRead {
                        txn: ev.txn_id,
                        addr,
                        observed,
                        expected,
                    });
                }
            }
            EventKind::Write { addr, value, .. } => {
                mem.insert(addr, value);
            }
            _ => {}
        }
    }
    bad
}

// ---- reference lock manager -----------------------------------------------

#[derive(Debug, Clone, Default)]
struct RefLock {
    holders: Vec<(SlotRef, LockMode)>,
    waiters: VecDeque<(SlotRef, LockMode)>,
    // Group mode as the hardware keeps it: joined on every grant, reset
    // only when the last holder leaves.
    group: LockMode,
}

/// Unbounded lock manager keyed by lock id. Grants when the lock is free,
/// or when nobody waits and the request fits the current group mode.
/// Waiting is strict FIFO.
#[derive(Debug, Clone, Default)]
pub struct ReferenceLockManager {
    locks: BTreeMap<LockId, RefLock>,
}

impl ReferenceLockManager {
    pub fn new() -> Self {
        Self::default()
    }

    /// Decides `req` and returns the responses in emission order.
    pub fn apply(&mut self, req: &LockRequest) -> Vec<LockResponse> {
        let resp = |to: SlotRef, mode: LockMode, kind| LockResponse {
            to,
            lock_id: req.lock_id,
            mode,
            kind,
        };
        let lock = self.locks.entry(req.lock_id).or_default();
        match req.kind {
            RequestKind::Get => {
                let free = lock.holders.is_empty();
                if free || (lock.waiters.is_empty() && req.mode.compatible_with(lock.group)) {
                    lock.holders.push((req.requester, req.mode));
                    lock.group = lock.group.join(req.mode);
                    vec![resp(req.requester, req.mode, ResponseKind::Granted)]
                } else {
                    lock.waiters.push_back((req.requester, req.mode));
                    vec![resp(req.requester, req.mode, ResponseKind::Waiting)]
                }
            }
            RequestKind::Release { timeout } => {
                let released = resp(req.requester, req.mode, ResponseKind::Released);
                if timeout {
                    if let Some(p) = lock.waiters.iter().position(|w| w.0 == req.requester) {
                        lock.waiters.remove(p);
                        return vec![released];
                    }
                }
                let Some(p) = lock.holders.iter().position(|h| h.0 == req.requester) else {
                    return vec![released];
                };
                lock.holders.swap_remove(p);
                let mut out = vec![released];
                if lock.holders.is_empty() {
                    lock.group = LockMode::NL;
                    while let Some(&(who, mode)) = lock.waiters.front() {
                        if !lock.holders.is_empty() && !mode.compatible_with(lock.group) {
                            break;
                        }
                        lock.waiters.pop_front();
                        lock.holders.push((who, mode));
                        lock.group = lock.group.join(mode);
                        out.push(resp(who, mode, ResponseKind::Granted));
                    }
                }
                out
            }
        }
    }

    pub fn holders(&self, lock: LockId) -> Vec<(SlotRef, LockMode)> {
        self.locks.get(&lock).map(|l| l.holders.clone()).unwrap_or_default()
    }

    pub fn waiters(&self, lock: LockId) -> Vec<(SlotRef, LockMode)> {
        self.locks
            .get(&lock)
            .map(|l| l.waiters.iter().copied().collect())
            .unwrap_or_default()
    }

    pub fn is_empty(&self) -> bool {
        self.locks
            .values()
            .all(|l| l.holders.is_empty() && l.waiters.is_empty())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Divergence {
    /// Index of the request in the micro trace.
    pub step: usize,
    pub request: LockRequest,
    pub agent: Vec<LockResponse>,
    pub reference: Vec<LockResponse>,
}

impl fmt::Display for Divergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let show = |v: &[LockResponse]| {
            v.iter()
                .map(|r| format!("{}:{}/{}", r.kind.as_str(), r.to.slot, r.lock_id))
                .collect::<Vec<_>>()
                .join(",")
        };
        write!(
            f,
            "step {}: agent [{}] vs reference [{}]",
            self.step,
            show(&self.agent),
            show(&self.reference)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum MicroTraceError {
    /// Two lock ids of the trace share a table entry.
    Collision(LockId, LockId),
}

/// Feeds `trace` through a fresh lock agent and the reference manager and
/// compares the responses request by request.
pub fn decision_equivalence(
    cfg: LockAgentConfig,
    trace: &[LockRequest],
) -> Result<Option<Divergence>, MicroTraceError> {
    let mut agent = LockAgent::new(cfg, 0);
    let mut seen: HashMap<usize, LockId> = HashMap::new();
    for r in trace {
        let idx = agent.table_index(r);
        if let Some(&other) = seen.get(&idx) {
            if other != r.lock_id {
                return Err(MicroTraceError::Collision(other, r.lock_id));
            }
        }
        seen.insert(idx, r.lock_id);
    }
    let mut reference = ReferenceLockManager::new();
    for (step, req) in trace.iter().enumerate() {
        let got: Vec<LockResponse> = agent.serve(*req).responses.iter().map(|s| s.response).collect();
        let want = reference.apply(req);
        if got != want {
            return Ok(Some(Divergence {
                step,
                request: *req,
                agent: got,
                reference: want,
            }));
        }
    }
    Ok(None)
}

/// Random well-formed micro trace of `len` requests over `locks` lock ids:
/// Gets from fresh requesters, releases of held locks and timeout releases
/// of queued ones. Chains stay below `max_chain`.
pub fn random_micro_trace(seed: u64, len: usize, locks: usize, max_chain: usize) -> Vec<LockRequest> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<LockId> = (0..locks as u64).map(|i| LockId(0x1000 + i * 7919)).collect();
    let mut shadow = ReferenceLockManager::new();
    let mut next_slot = 0u16;
    let mut out = Vec::with_capacity(len);
    while out.len() < len {
        let lock = *ids.choose(&mut rng).unwrap();
        let holders = shadow.holders(lock);
        let waiters = shadow.waiters(lock);
        let roll = rng.random_range(0..10);
        let req = if roll < 5 && waiters.len() < max_chain {
            let mode = LockMode::ALL[rng.random_range(1..6)];
            let who = SlotRef::new(0, next_slot, 0);
            next_slot = next_slot.wrapping_add(1);
            LockRequest::get(who, lock, mode)
        } else if roll < 8 && !holders.is_empty() {
            let (who, mode) = *holders.choose(&mut rng).unwrap();
            LockRequest::release(who, lock, mode, false)
        } else if !waiters.is_empty() {
            let (who, mode) = *waiters.choose(&mut rng).unwrap();
            LockRequest::release(who, lock, mode, true)
        } else {
            continue;
        };
        shadow.apply(&req);
        out.push(req);
    }
    out
}

// ---- audit ----------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub enum Violation {
    NotDrained { agent: usize, entries: usize, pool: usize },
    Conservation(String),
    OwnerBalance(String),
    AbortedWrite { txn: u64 },
    Unfinished { busy_slots: usize, pending: usize },
    NotSerializable { cycle: Vec<u64> },
    StaleRead(StaleRead),
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NotDrained { agent, entries, pool } => write!(
                f,
                "drain: lock agent {agent} has {entries} live entries and {pool} pool slots"
            ),
            Violation::Conservation(s) => write!(f, "conservation: {s}"),
            Violation::OwnerBalance(s) => write!(f, "owner balance: {s}"),
            Violation::AbortedWrite { txn } => write!(f, "aborted txn {txn} wrote data"),
            Violation::Unfinished { busy_slots, pending } => {
                write!(f, "unfinished: {busy_slots} busy slots, {pending} pending txns")
            }
            Violation::NotSerializable { cycle } => write!(f, "conflict cycle {cycle:?}"),
            Violation::StaleRead(r) => write!(
                f,
                "txn {} read {} at {:#x}, last committed write was {}",
                r.txn, r.observed, r.addr, r.expected
            ),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct AuditReport {
    pub violations: Vec<Violation>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has_drain(&self) -> bool {
        self.violations.iter().any(|v| matches!(v, Violation::NotDrained { .. }))
    }

    pub fn has_conservation(&self) -> bool {
        self.violations.iter().any(|v| matches!(v, Violation::Conservation(_)))
    }
}

fn check_eq(out: &mut Vec<Violation>, what: &str, a: u64, b: u64) {
    if a != b {
        out.push(Violation::Conservation(format!("{what}: {a} != {b}")));
    }
}

/// Structural checks on a run. Serializability is checked separately by
/// [`check_serializable`]; [`full_check`] runs everything.
pub fn audit(run: &RunOutput) -> AuditReport {
    let st = &run.state;
    let mut v = Vec::new();

    for (i, d) in st.drain.iter().enumerate() {
        if !d.is_drained() {
            v.push(Violation::NotDrained {
                agent: i,
                entries: d.busy_entries.len(),
                pool: d.valid_pool_entries.len(),
            });
        }
    }
    if st.busy_slots > 0 || st.pending_txns > 0 {
        v.push(Violation::Unfinished {
            busy_slots: st.busy_slots,
            pending: st.pending_txns,
        });
    }

    // Lock agent side.
    for (i, a) in st.lock_agents.iter().enumerate() {
        check_eq(
            &mut v,
            &format!("agent {i} gets vs grants+waits+aborts"),
            a.gets,
            a.direct_grants + a.waits + a.aborts(),
        );
        check_eq(
            &mut v,
            &format!("agent {i} releases vs owner+queue+spurious"),
            a.releases,
            a.owner_releases + a.waitq_deletions + a.spurious_releases,
        );
        check_eq(
            &mut v,
            &format!("agent {i} waits vs pops+deletions"),
            a.waits,
            a.pop_grants + a.waitq_deletions,
        );
        check_eq(
            &mut v,
            &format!("agent {i} grants vs owner releases"),
            a.direct_grants + a.pop_grants,
            a.owner_releases,
        );
        if a.spurious_releases > 0 {
            v.push(Violation::OwnerBalance(format!(
                "agent {i} saw {} releases of unowned entries",
                a.spurious_releases
            )));
        }
    }

    // Both ends of the network.
    let sum_la = |f: fn(&crate::lock_agent::LockAgentStats) -> u64| st.lock_agents.iter().map(f).sum::<u64>();
    let sum_ta = |f: fn(&crate::txn_agent::TxnAgentStats) -> u64| st.txn_agents.iter().map(f).sum::<u64>();
    check_eq(&mut v, "gets sent vs received", sum_ta(|s| s.gets_sent), sum_la(|s| s.gets));
    check_eq(
        &mut v,
        "releases sent vs received",
        sum_ta(|s| s.releases_sent),
        sum_la(|s| s.releases),
    );
    for k in ResponseKind::ALL {
        let i = k.index();
        let sent: u64 = st.lock_agents.iter().map(|s| s.responses[i]).sum();
        let got: u64 = st.txn_agents.iter().map(|s| s.responses[i]).sum();
        check_eq(&mut v, &format!("{} responses sent vs delivered", k.as_str()), sent, got);
    }
    check_eq(
        &mut v,
        "releases sent vs released responses",
        sum_ta(|s| s.releases_sent),
        sum_ta(|s| s.responses[ResponseKind::Released.index()]),
    );
    if st.fabric.responses_dropped > 0 {
        v.push(Violation::Conservation(format!(
            "{} responses lost in the network",
            st.fabric.responses_dropped
        )));
    }
    let finished = sum_ta(|s| s.committed) + sum_ta(|s| s.aborted());
    check_eq(&mut v, "finished vs workload txns", finished, st.workload_txns as u64);

    // History: every grant is released, every txn ends once, aborted txns
    // never write.
    let mut held: BTreeSet<(u64, LockId)> = BTreeSet::new();
    let mut aborted: HashSet<u64> = HashSet::new();
    let mut ended: HashSet<u64> = HashSet::new();
    let mut writers: Vec<u64> = Vec::new();
    for ev in run.history.events() {
        match ev.kind {
            EventKind::Grant { lock, .. } => {
                if !held.insert((ev.txn_id, lock)) {
                    v.push(Violation::OwnerBalance(format!(
                        "txn {} granted {} twice",
                        ev.txn_id, lock
                    )));
                }
            }
            EventKind::Release { lock, .. } => {
                held.remove(&(ev.txn_id, lock));
            }
            EventKind::Write { .. } => writers.push(ev.txn_id),
            EventKind::Commit | EventKind::Abort { .. } => {
                if !ended.insert(ev.txn_id) {
                    v.push(Violation::OwnerBalance(format!("txn {} ended twice", ev.txn_id)));
                }
                // Commits are logged before the releases go out, aborts after.
                if ev.kind == EventKind::Commit {
                    continue;
                }
                aborted.insert(ev.txn_id);
                if let Some(&(_, lock)) = held.range((ev.txn_id, LockId(0))..=(ev.txn_id, LockId(u64::MAX))).next() {
                    v.push(Violation::OwnerBalance(format!(
                        "txn {} ended still holding {}",
                        ev.txn_id, lock
                    )));
                }
            }
            _ => {}
        }
    }
    if let Some(&(txn, lock)) = held.iter().next() {
        v.push(Violation::OwnerBalance(format!(
            "{} grants never released, first txn {txn} lock {lock}",
            held.len()
        )));
    }
    let mut flagged = HashSet::new();
    for t in writers {
        if aborted.contains(&t) && flagged.insert(t) {
            v.push(Violation::AbortedWrite { txn: t });
        }
    }
    AuditReport { violations: v }
}

/// Audit plus serializability and read visibility.
pub fn full_check(run: &RunOutput) -> AuditReport {
    let mut report = audit(run);
    if let Some(cycle) = check_serializable(&run.history).cycle {
        report.violations.push(Violation::NotSerializable { cycle });
    }
    report
        .violations
        .extend(replay_visibility(&run.history).into_iter().map(Violation::StaleRead));
    report
}
