//! TPC-C-like lock traces and the trace file format.
//!
//! Lock ids pack `tag:3 | warehouse:7 | district:4 | row:28` (42 bits). The
//! data row of a lock lives at `lock_id << 6`, 64 bytes long, so addresses
//! are injective and fit a 48-bit span.
//!
//! Trace grammar, one record per line:
//!
//! ```text
//! trace   := header NL (record NL)*
//! header  := "#txnaccel-trace v1" (" " key "=" value)*
//! record  := txn_id (" " lock)+
//! lock    := hex ":" mode ("@" hex "+" dec)?
//! mode    := "IS" | "IX" | "S" | "SIX" | "X"
//! ```
//!
//! Other lines starting with `#` and blank lines are ignored. The data part
//! must be present exactly for S, SIX and X.

use std::collections::HashSet;
use std::fmt::{self, Write as _};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lock::{LockId, LockMode};
use crate::txn_agent::{DataAccess, LockEntry, TxnDescriptor, MAX_LOCKS_PER_TXN};

pub const TRACE_MAGIC: &str = "#txnaccel-trace v1";
pub const ROW_BYTES: u32 = 64;

pub const DISTRICTS: u64 = 10;
pub const CUSTOMERS_PER_DISTRICT: u64 = 3000;
pub const STOCK_PER_WAREHOUSE: u64 = 100_000;
pub const MAX_WAREHOUSES: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Table {
    Warehouse = 0,
    District = 1,
    WarehouseRow = 2,
    DistrictRow = 3,
    Customer = 4,
    Stock = 5,
    Order = 6,
    OrderLine = 7,
}

pub fn lock_id(table: Table, warehouse: u64, district: u64, row: u64) -> LockId {
    debug_assert!(warehouse < 128 && district < 16 && row < (1 << 28));
    LockId(((table as u64) << 39) | (warehouse << 32) | (district << 28) | row)
}

pub fn warehouse_of(id: LockId) -> u64 {
    (id.0 >> 32) & 0x7f
}

pub fn data_addr(id: LockId) -> u64 {
    id.0 << 6
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mix {
    pub new_order: f64,
    pub payment: f64,
    pub read_only: f64,
}

impl Default for Mix {
    fn default() -> Self {
        Self {
            new_order: 0.45,
            payment: 0.43,
            read_only: 0.12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSpec {
    pub warehouses: usize,
    pub txn_agents: usize,
    pub txns_per_agent: usize,
    pub mix: Mix,
    /// Zipf exponent for row choice; 0 is uniform.
    pub skew: f64,
    /// Items per new-order transaction, inclusive range.
    pub order_lines: (u32, u32),
    /// Stock rows scanned by the long read-only transaction, inclusive range.
    pub scan_rows: (u32, u32),
    pub seed: u64,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            warehouses: 64,
            txn_agents: 4,
            txns_per_agent: 400,
            mix: Mix::default(),
            skew: 0.8,
            order_lines: (5, 15),
            scan_rows: (20, 400),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpecError {
    #[error("warehouses must be in 1..={MAX_WAREHOUSES}, got {0}")]
    Warehouses(usize),
    #[error("mix weights must be non-negative and sum to 1, got {0}")]
    Mix(f64),
    #[error("skew must be finite and non-negative, got {0}")]
    Skew(f64),
    #[error("{0} range {1}..={2} is empty or too large")]
    Range(&'static str, u32, u32),
    #[error("txn agents must be at least 1")]
    Agents,
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), SpecError> {
        if self.warehouses == 0 || self.warehouses > MAX_WAREHOUSES {
            return Err(SpecError::Warehouses(self.warehouses));
        }
        if self.txn_agents == 0 {
            return Err(SpecError::Agents);
        }
        let m = self.mix;
        let sum = m.new_order + m.payment + m.read_only;
        if [m.new_order, m.payment, m.read_only].iter().any(|w| *w < 0.0 || !w.is_finite())
            || (sum - 1.0).abs() > 1e-9
        {
            return Err(SpecError::Mix(sum));
        }
        if !(self.skew.is_finite() && self.skew >= 0.0) {
            return Err(SpecError::Skew(self.skew));
        }
        let (a, b) = self.order_lines;
        if a == 0 || a > b || 2 * b as usize + 7 > MAX_LOCKS_PER_TXN {
            return Err(SpecError::Range("order lines", a, b));
        }
        let (a, b) = self.scan_rows;
        if a == 0 || a > b || b as usize + 3 > MAX_LOCKS_PER_TXN || b as u64 > STOCK_PER_WAREHOUSE {
            return Err(SpecError::Range("scan rows", a, b));
        }
        Ok(())
    }

    pub fn total_txns(&self) -> usize {
        self.txn_agents * self.txns_per_agent
    }

    fn header(&self) -> String {
        let m = self.mix;
        format!(
            "{TRACE_MAGIC} warehouses={} txn_agents={} txns_per_agent={} mix={},{},{} skew={} order_lines={}-{} scan_rows={}-{} seed={}",
            self.warehouses,
            self.txn_agents,
            self.txns_per_agent,
            m.new_order,
            m.payment,
            m.read_only,
            self.skew,
            self.order_lines.0,
            self.order_lines.1,
            self.scan_rows.0,
            self.scan_rows.1,
            self.seed
        )
    }
}

/// Row chooser: Zipf over `1..=n` (rank 1 hottest), or uniform at skew 0.
struct RowPicker {
    n: u64,
    zipf: Option<Zipf<f64>>,
}

impl RowPicker {
    fn new(n: u64, skew: f64) -> Self {
        let zipf = (skew > 0.0).then(|| Zipf::new(n as f64, skew).expect("valid zipf"));
        Self { n, zipf }
    }

    fn pick(&self, rng: &mut ChaCha8Rng) -> u64 {
        match &self.zipf {
            Some(z) => (z.sample(rng) as u64).clamp(1, self.n) - 1,
            None => rng.random_range(0..self.n),
        }
    }
}

struct Builder {
    locks: Vec<LockEntry>,
    seen: HashSet<LockId>,
}

impl Builder {
    fn new() -> Self {
        Self {
            locks: Vec::new(),
            seen: HashSet::new(),
        }
    }

    fn add(&mut self, id: LockId, mode: LockMode) -> bool {
        if !self.seen.insert(id) {
            return false;
        }
        let data = mode.data_access().map(|_| DataAccess {
            addr: data_addr(id),
            len: ROW_BYTES,
        });
        self.locks.push(LockEntry { lock_id: id, mode, data });
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TxnKind {
    NewOrder,
    Payment,
    OrderStatus,
    StockLevel,
}

pub const DECK_SIZE: usize = 100;

/// Card counts for one deck. Read-only cards split two to one between short
/// order-status reads and long stock scans.
pub fn deck_counts(mix: &Mix) -> [(TxnKind, usize); 4] {
    let ro = mix.read_only * DECK_SIZE as f64;
    let raw = [
        (TxnKind::NewOrder, mix.new_order * DECK_SIZE as f64),
        (TxnKind::Payment, mix.payment * DECK_SIZE as f64),
        (TxnKind::OrderStatus, ro * 2.0 / 3.0),
        (TxnKind::StockLevel, ro / 3.0),
    ];
    // largest remainder rounding so the deck always has DECK_SIZE cards
    let mut out = raw.map(|(k, x)| (k, x.floor() as usize));
    let short = DECK_SIZE - out.iter().map(|(_, n)| n).sum::<usize>();
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| {
        let ra = raw[a].1 - raw[a].1.floor();
        let rb = raw[b].1 - raw[b].1.floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(short) {
        out[i].1 += 1;
    }
    out
}

pub struct Generator {
    spec: WorkloadSpec,
    rng: ChaCha8Rng,
    customers: RowPicker,
    stock: RowPicker,
    next_order: Vec<u64>,
    decks: Vec<Vec<TxnKind>>,
}

impl Generator {
    pub fn new(spec: WorkloadSpec) -> Result<Self, SpecError> {
        spec.validate()?;
        Ok(Self {
            spec,
            rng: ChaCha8Rng::seed_from_u64(spec.seed),
            customers: RowPicker::new(CUSTOMERS_PER_DISTRICT, spec.skew),
            stock: RowPicker::new(STOCK_PER_WAREHOUSE, spec.skew),
            next_order: vec![0; spec.warehouses * DISTRICTS as usize],
            decks: vec![Vec::new(); spec.txn_agents],
        })
    }

    fn new_order_id(&mut self, w: u64, d: u64) -> u64 {
        let slot = &mut self.next_order[(w * DISTRICTS + d) as usize];
        *slot += 1;
        *slot
    }

    /// Next transaction type for the agent that will run `txn_id`. Every
    /// agent draws from its own shuffled deck, as TPC-C terminals do, so the
    /// mix holds per agent and not only on average.
    fn draw(&mut self, txn_id: u64) -> TxnKind {
        let a = (txn_id % self.spec.txn_agents as u64) as usize;
        if self.decks[a].is_empty() {
            let mut deck: Vec<TxnKind> = deck_counts(&self.spec.mix)
                .iter()
                .flat_map(|&(k, n)| std::iter::repeat_n(k, n))
                .collect();
            deck.shuffle(&mut self.rng);
            self.decks[a] = deck;
        }
        self.decks[a].pop().unwrap()
    }

    pub fn next_txn(&mut self, txn_id: u64) -> TxnDescriptor {
        let kind = self.draw(txn_id);
        let w = self.rng.random_range(0..self.spec.warehouses as u64);
        let d = self.rng.random_range(0..DISTRICTS);
        let mut b = Builder::new();
        match kind {
            TxnKind::NewOrder => self.new_order(&mut b, w, d),
            TxnKind::Payment => self.payment(&mut b, w, d),
            TxnKind::OrderStatus => self.order_status(&mut b, w, d),
            TxnKind::StockLevel => self.stock_level(&mut b, w, d),
        }
        TxnDescriptor { txn_id, locks: b.locks }
    }

    // Reads the warehouse tax and customer, bumps the district order id,
    // inserts an order and decrements the stock of every ordered item.
    fn new_order(&mut self, b: &mut Builder, w: u64, d: u64) {
        b.add(lock_id(Table::Warehouse, w, 0, 0), LockMode::IX);
        b.add(lock_id(Table::District, w, d, 0), LockMode::IX);
        b.add(lock_id(Table::WarehouseRow, w, 0, 0), LockMode::S);
        b.add(lock_id(Table::DistrictRow, w, d, 0), LockMode::X);
        let c = self.customers.pick(&mut self.rng);
        b.add(lock_id(Table::Customer, w, d, c), LockMode::S);
        let o = self.new_order_id(w, d);
        b.add(lock_id(Table::Order, w, d, o), LockMode::X);
        let (lo, hi) = self.spec.order_lines;
        let lines = self.rng.random_range(lo..=hi);
        let mut added = 0;
        while added < lines {
            let s = self.stock.pick(&mut self.rng);
            if b.add(lock_id(Table::Stock, w, 0, s), LockMode::X) {
                added += 1;
            }
        }
        for l in 0..lines as u64 {
            b.add(lock_id(Table::OrderLine, w, d, (o << 4) | l), LockMode::X);
        }
    }

    // Updates warehouse and district year-to-date totals and the customer balance.
    fn payment(&mut self, b: &mut Builder, w: u64, d: u64) {
        b.add(lock_id(Table::Warehouse, w, 0, 0), LockMode::IX);
        b.add(lock_id(Table::District, w, d, 0), LockMode::IX);
        b.add(lock_id(Table::WarehouseRow, w, 0, 0), LockMode::X);
        b.add(lock_id(Table::DistrictRow, w, d, 0), LockMode::X);
        let c = self.customers.pick(&mut self.rng);
        b.add(lock_id(Table::Customer, w, d, c), LockMode::X);
    }

    fn order_status(&mut self, b: &mut Builder, w: u64, d: u64) {
        b.add(lock_id(Table::Warehouse, w, 0, 0), LockMode::IS);
        b.add(lock_id(Table::District, w, d, 0), LockMode::IS);
        let c = self.customers.pick(&mut self.rng);
        b.add(lock_id(Table::Customer, w, d, c), LockMode::S);
        let last = self.next_order[(w * DISTRICTS + d) as usize];
        b.add(lock_id(Table::Order, w, d, last), LockMode::S);
        for l in 0..self.rng.random_range(5..=15u64) {
            b.add(lock_id(Table::OrderLine, w, d, (last << 4) | l), LockMode::S);
        }
    }

    fn stock_level(&mut self, b: &mut Builder, w: u64, d: u64) {
        b.add(lock_id(Table::Warehouse, w, 0, 0), LockMode::IS);
        b.add(lock_id(Table::District, w, d, 0), LockMode::IS);
        b.add(lock_id(Table::DistrictRow, w, d, 0), LockMode::S);
        let (lo, hi) = self.spec.scan_rows;
        let rows = self.rng.random_range(lo..=hi);
        let mut added = 0;
        while added < rows {
            let s = self.stock.pick(&mut self.rng);
            if b.add(lock_id(Table::Stock, w, 0, s), LockMode::S) {
                added += 1;
            }
        }
    }
}

/// Generated workload plus the header echoing its spec.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub header: String,
    pub txns: Vec<TxnDescriptor>,
}

impl Trace {
    pub fn write_to(&self, mut w: impl std::io::Write) -> std::io::Result<()> {
        writeln!(w, "{}", self.header)?;
        let mut line = String::new();
        for t in &self.txns {
            line.clear();
            format_record(&mut line, t).expect("writing to a String");
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec");
        String::from_utf8(out).expect("ascii")
    }
}

fn format_record(out: &mut String, t: &TxnDescriptor) -> fmt::Result {
    write!(out, "{}", t.txn_id)?;
    for l in &t.locks {
        write!(out, " {:x}:{}", l.lock_id.0, l.mode)?;
        if let Some(d) = l.data {
            write!(out, "@{:x}+{}", d.addr, d.len)?;
        }
    }
    Ok(())
}

/// Deterministic in `spec` (the seed is part of it).
pub fn generate(spec: &WorkloadSpec) -> Result<Trace, SpecError> {
    let mut g = Generator::new(*spec)?;
    let txns = (0..spec.total_txns() as u64).map(|i| g.next_txn(i)).collect();
    Ok(Trace {
        header: spec.header(),
        txns,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ViolationKind {
    MissingHeader,
    Malformed(String),
    IllegalMode(String),
    NlGet,
    TooManyLocks(usize),
    MissingData(LockMode),
    UnexpectedData(LockMode),
    ZeroLength,
    DuplicateLock(LockId),
    DuplicateTxn(u64),
    EmptyTxn,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ViolationKind::MissingHeader => write!(f, "missing `{TRACE_MAGIC}` header"),
            ViolationKind::Malformed(m) => write!(f, "malformed record: {m}"),
            ViolationKind::IllegalMode(m) => write!(f, "illegal lock mode `{m}`"),
            ViolationKind::NlGet => write!(f, "NL is not a lock request"),
            ViolationKind::TooManyLocks(n) => {
                write!(f, "{n} locks: max size for one txn is {MAX_LOCKS_PER_TXN}")
            }
            ViolationKind::MissingData(m) => write!(f, "{m} lock without data address"),
            ViolationKind::UnexpectedData(m) => write!(f, "{m} lock must not carry a data address"),
            ViolationKind::ZeroLength => write!(f, "zero-length data access"),
            ViolationKind::DuplicateLock(id) => write!(f, "lock {:x} repeated", id.0),
            ViolationKind::DuplicateTxn(id) => write!(f, "txn id {id} repeated"),
            ViolationKind::EmptyTxn => write!(f, "txn has no locks"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub line: usize,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.kind)
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("reading trace: {0}")]
    Io(#[from] std::io::Error),
    #[error("{} violation(s), first: {}", .0.len(), .0[0])]
    Invalid(Vec<Violation>),
}

fn parse_lock(tok: &str) -> Result<LockEntry, ViolationKind> {
    let malformed = |m: &str| ViolationKind::Malformed(format!("`{tok}`: {m}"));
    let (id, rest) = tok.split_once(':').ok_or_else(|| malformed("expected lock:mode"))?;
    let id = u64::from_str_radix(id, 16).map_err(|_| malformed("bad lock id"))?;
    let (mode, data) = match rest.split_once('@') {
        Some((m, d)) => (m, Some(d)),
        None => (rest, None),
    };
    let mode: LockMode = mode
        .parse()
        .map_err(|_| ViolationKind::IllegalMode(mode.to_string()))?;
    if mode == LockMode::NL {
        return Err(ViolationKind::NlGet);
    }
    let data = match data {
        None => None,
        Some(d) => {
            let (addr, len) = d.split_once('+').ok_or_else(|| malformed("expected addr+len"))?;
            let addr = u64::from_str_radix(addr, 16).map_err(|_| malformed("bad address"))?;
            let len: u32 = len.parse().map_err(|_| malformed("bad length"))?;
            Some(DataAccess { addr, len })
        }
    };
    match (mode.data_access(), data) {
        (Some(_), None) => Err(ViolationKind::MissingData(mode)),
        (None, Some(_)) => Err(ViolationKind::UnexpectedData(mode)),
        (Some(_), Some(d)) if d.len == 0 => Err(ViolationKind::ZeroLength),
        _ => Ok(LockEntry {
            lock_id: LockId(id),
            mode,
            data,
        }),
    }
}

fn parse_record(line: &str) -> Result<TxnDescriptor, ViolationKind> {
    let mut toks = line.split_ascii_whitespace();
    let id = toks.next().ok_or(ViolationKind::EmptyTxn)?;
    let txn_id: u64 = id
        .parse()
        .map_err(|_| ViolationKind::Malformed(format!("bad txn id `{id}`")))?;
    let mut locks = Vec::new();
    let mut seen = HashSet::new();
    for tok in toks {
        let l = parse_lock(tok)?;
        if !seen.insert(l.lock_id) {
            return Err(ViolationKind::DuplicateLock(l.lock_id));
        }
        locks.push(l);
    }
    if locks.is_empty() {
        return Err(ViolationKind::EmptyTxn);
    }
    if locks.len() > MAX_LOCKS_PER_TXN {
        return Err(ViolationKind::TooManyLocks(locks.len()));
    }
    Ok(TxnDescriptor { txn_id, locks })
}

/// Parses and validates a whole trace, collecting every violation.
pub fn parse_trace(text: &str) -> Result<Vec<TxnDescriptor>, Vec<Violation>> {
    let mut violations = Vec::new();
    let mut txns = Vec::new();
    let mut ids = HashSet::new();
    let mut header = false;
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        let trimmed = line.trim();
        if !header {
            if trimmed.is_empty() {
                continue;
            }
            if trimmed == TRACE_MAGIC || trimmed.starts_with(&format!("{TRACE_MAGIC} ")) {
                header = true;
                continue;
            }
            violations.push(Violation { line: line_no, kind: ViolationKind::MissingHeader });
            header = true;
        }
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        match parse_record(trimmed) {
            Ok(t) => {
                if !ids.insert(t.txn_id) {
                    violations.push(Violation { line: line_no, kind: ViolationKind::DuplicateTxn(t.txn_id) });
                }
                txns.push(t);
            }
            Err(kind) => violations.push(Violation { line: line_no, kind }),
        }
    }
    if !header {
        violations.push(Violation { line: 1, kind: ViolationKind::MissingHeader });
    }
    if violations.is_empty() {
        Ok(txns)
    } else {
        Err(violations)
    }
}

pub fn load_and_validate(path: impl AsRef<Path>) -> Result<Vec<TxnDescriptor>, TraceError> {
    let text = std::fs::read_to_string(path)?;
    parse_trace(&text).map_err(TraceError::Invalid)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> WorkloadSpec {
        WorkloadSpec {
            txn_agents: 2,
            txns_per_agent: 100,
            seed,
            ..WorkloadSpec::default()
        }
    }

    #[test]
    fn lock_id_packing() {
        let id = lock_id(Table::Stock, 63, 9, (1 << 28) - 1);
        assert_eq!(id.0 >> 39, Table::Stock as u64);
        assert_eq!(warehouse_of(id), 63);
        assert!(id.0 < 1 << 42);
        assert!(data_addr(id) + ROW_BYTES as u64 <= 1 << 48);
    }

    #[test]
    fn deck_matches_mix() {
        let counts = deck_counts(&Mix::default());
        assert_eq!(counts.iter().map(|c| c.1).sum::<usize>(), DECK_SIZE);
        assert_eq!(counts[0], (TxnKind::NewOrder, 45));
        assert_eq!(counts[1], (TxnKind::Payment, 43));
        assert_eq!(counts[2], (TxnKind::OrderStatus, 8));
        assert_eq!(counts[3], (TxnKind::StockLevel, 4));
        let odd = Mix { new_order: 1.0 / 3.0, payment: 1.0 / 3.0, read_only: 1.0 / 3.0 };
        assert_eq!(deck_counts(&odd).iter().map(|c| c.1).sum::<usize>(), DECK_SIZE);
    }

    #[test]
    fn deterministic_bytes() {
        assert_eq!(generate(&small(3)).unwrap().to_text(), generate(&small(3)).unwrap().to_text());
        assert_ne!(generate(&small(3)).unwrap().to_text(), generate(&small(4)).unwrap().to_text());
    }

    #[test]
    fn generated_txns_are_valid_and_intent_first() {
        for t in generate(&small(1)).unwrap().txns {
            t.validate().unwrap();
            let first_row = t
                .locks
                .iter()
                .position(|l| !matches!(l.mode, LockMode::IS | LockMode::IX))
                .unwrap();
            assert!(t.locks[first_row..]
                .iter()
                .all(|l| !matches!(l.mode, LockMode::IS | LockMode::IX)));
            assert!(first_row >= 2);
        }
    }

    #[test]
    fn round_trip() {
        let trace = generate(&small(7)).unwrap();
        assert_eq!(parse_trace(&trace.to_text()).unwrap(), trace.txns);
    }

    #[test]
    fn spec_validation() {
        let mut s = WorkloadSpec::default();
        s.mix.payment = 0.5;
        assert!(matches!(s.validate(), Err(SpecError::Mix(_))));
        let s = WorkloadSpec { warehouses: 0, ..WorkloadSpec::default() };
        assert!(s.validate().is_err());
        let s = WorkloadSpec { scan_rows: (10, 600), ..WorkloadSpec::default() };
        assert!(s.validate().is_err());
    }

    fn violation(text: &str) -> ViolationKind {
        let full = format!("{TRACE_MAGIC}\n{text}\n");
        let v = parse_trace(&full).unwrap_err();
        assert_eq!(v.len(), 1, "{v:?}");
        assert_eq!(v[0].line, 2);
        v[0].kind.clone()
    }

    #[test]
    fn distinct_diagnostics() {
        assert!(matches!(violation("1 10:S@400"), ViolationKind::Malformed(_)));
        assert!(matches!(violation("x 10:S@400+64"), ViolationKind::Malformed(_)));
        assert_eq!(violation("1 10:Q"), ViolationKind::IllegalMode("Q".into()));
        assert_eq!(violation("1 10:NL"), ViolationKind::NlGet);
        assert_eq!(violation("1 10:X"), ViolationKind::MissingData(LockMode::X));
        assert_eq!(violation("1 10:IS@400+64"), ViolationKind::UnexpectedData(LockMode::IS));
        assert_eq!(violation("1 10:S@400+0"), ViolationKind::ZeroLength);
        assert_eq!(violation("1 10:IS 10:IX"), ViolationKind::DuplicateLock(LockId(0x10)));
        assert_eq!(violation("1"), ViolationKind::EmptyTxn);
        let many: String = (0..512).map(|i| format!(" {i:x}:IS")).collect();
        let kind = violation(&format!("1{many}"));
        assert_eq!(kind, ViolationKind::TooManyLocks(512));
        assert!(kind.to_string().contains("max size for one txn is 511"));
    }

    #[test]
    fn header_and_duplicate_ids() {
        let v = parse_trace("1 10:IS\n").unwrap_err();
        assert_eq!(v[0].kind, ViolationKind::MissingHeader);
        let v = parse_trace(&format!("{TRACE_MAGIC}\n1 10:IS\n# note\n1 11:IS\n")).unwrap_err();
        assert_eq!(v, vec![Violation { line: 4, kind: ViolationKind::DuplicateTxn(1) }]);
        assert_eq!(parse_trace(TRACE_MAGIC).unwrap(), vec![]);
    }
}
