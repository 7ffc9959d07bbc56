//! Event log of a run: grants and releases of every transaction, plus the
//! data operations of committed ones. One line per event:
//!
//! ```text
//! <cycle> <agent> <txn> G <lock> <mode> <entry>
//! <cycle> <agent> <txn> L <lock> <entry>
//! <cycle> <agent> <txn> R <lock> <entry> <addr> <observed>
//! <cycle> <agent> <txn> W <lock> <entry> <addr> <value>
//! <cycle> <agent> <txn> C
//! <cycle> <agent> <txn> A timeout|denied
//! ```
//!
//! Numbers are decimal except lock ids, entries and addresses, which are hex
//! without a prefix. `entry` identifies the lock table entry as
//! `global_agent << 32 | index`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::lock::{LockId, LockMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AbortCause {
    Timeout,
    Denied,
}

impl AbortCause {
    pub fn as_str(self) -> &'static str {
        match self {
            AbortCause::Timeout => "timeout",
            AbortCause::Denied => "denied",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    Grant { lock: LockId, mode: LockMode, entry: u64 },
    Release { lock: LockId, entry: u64 },
    Read { lock: LockId, entry: u64, addr: u64, observed: u64 },
    Write { lock: LockId, entry: u64, addr: u64, value: u64 },
    Commit,
    Abort { cause: AbortCause },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HistoryEvent {
    pub cycle: u64,
    pub agent: u16,
    pub txn_id: u64,
    pub kind: EventKind,
}

impl fmt::Display for HistoryEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} ", self.cycle, self.agent, self.txn_id)?;
        match self.kind {
            EventKind::Grant { lock, mode, entry } => write!(f, "G {:x} {} {:x}", lock.0, mode, entry),
            EventKind::Release { lock, entry } => write!(f, "L {:x} {:x}", lock.0, entry),
            EventKind::Read { lock, entry, addr, observed } => {
                write!(f, "R {:x} {:x} {:x} {}", lock.0, entry, addr, observed)
            }
            EventKind::Write { lock, entry, addr, value } => {
                write!(f, "W {:x} {:x} {:x} {}", lock.0, entry, addr, value)
            }
            EventKind::Commit => write!(f, "C"),
            EventKind::Abort { cause } => write!(f, "A {}", cause.as_str()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("history line {line}: {msg}")]
pub struct HistoryParseError {
    pub line: usize,
    pub msg: String,
}

impl FromStr for HistoryEvent {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let f: Vec<&str> = s.split_ascii_whitespace().collect();
        let dec = |i: usize| -> Result<u64, String> {
            f.get(i)
                .ok_or_else(|| format!("missing field {i}"))?
                .parse::<u64>()
                .map_err(|e| format!("field {i}: {e}"))
        };
        let hex = |i: usize| -> Result<u64, String> {
            let v = f.get(i).ok_or_else(|| format!("missing field {i}"))?;
            u64::from_str_radix(v, 16).map_err(|e| format!("field {i}: {e}"))
        };
        let want = |n: usize| -> Result<(), String> {
            if f.len() == n {
                Ok(())
            } else {
                Err(format!("expected {n} fields, found {}", f.len()))
            }
        };
        let tag = *f.get(3).ok_or("missing event tag")?;
        let kind = match tag {
            "G" => {
                want(7)?;
                EventKind::Grant {
                    lock: LockId(hex(4)?),
                    mode: f[5].parse().map_err(|e| format!("{e}"))?,
                    entry: hex(6)?,
                }
            }
            "L" => {
                want(6)?;
                EventKind::Release { lock: LockId(hex(4)?), entry: hex(5)? }
            }
            "R" => {
                want(8)?;
                EventKind::Read { lock: LockId(hex(4)?), entry: hex(5)?, addr: hex(6)?, observed: dec(7)? }
            }
            "W" => {
                want(8)?;
                EventKind::Write { lock: LockId(hex(4)?), entry: hex(5)?, addr: hex(6)?, value: dec(7)? }
            }
            "C" => {
                want(4)?;
                EventKind::Commit
            }
            "A" => {
                want(5)?;
                let cause = match f[4] {
                    "timeout" => AbortCause::Timeout,
                    "denied" => AbortCause::Denied,
                    other => return Err(format!("unknown abort cause `{other}`")),
                };
                EventKind::Abort { cause }
            }
            other => return Err(format!("unknown event tag `{other}`")),
        };
        Ok(HistoryEvent {
            cycle: dec(0)?,
            agent: u16::try_from(dec(1)?).map_err(|e| e.to_string())?,
            txn_id: dec(2)?,
            kind,
        })
    }
}

/// Append-only, ordered by cycle, ties broken by agent index.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HistoryLog {
    events: Vec<HistoryEvent>,
}

impl HistoryLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// Panics if `ev` would break the (cycle, agent) order.
    pub fn push(&mut self, ev: HistoryEvent) {
        if let Some(last) = self.events.last() {
            assert!(
                (last.cycle, last.agent) <= (ev.cycle, ev.agent),
                "history out of order: {last} then {ev}"
            );
        }
        self.events.push(ev);
    }

    /// Builds a log from events in any order (test and replay use).
    pub fn from_events(events: Vec<HistoryEvent>) -> Self {
        Self { events }
    }

    pub fn events(&self) -> &[HistoryEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn write_to(&self, mut w: impl std::io::Write) -> std::io::Result<()> {
        for ev in &self.events {
            writeln!(w, "{ev}")?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec");
        String::from_utf8(out).expect("ascii")
    }

    pub fn parse(text: &str) -> Result<Self, HistoryParseError> {
        let mut events = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let ev = line
                .parse()
                .map_err(|msg| HistoryParseError { line: n + 1, msg })?;
            events.push(ev);
        }
        Ok(Self { events })
    }

    /// SHA-256 over the line format, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for ev in &self.events {
            h.update(ev.to_string().as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> HistoryLog {
        let mut log = HistoryLog::new();
        let l = LockId(0xabc);
        log.push(HistoryEvent { cycle: 5, agent: 0, txn_id: 1, kind: EventKind::Grant { lock: l, mode: LockMode::SIX, entry: 0x1_0000_0007 } });
        log.push(HistoryEvent { cycle: 9, agent: 0, txn_id: 1, kind: EventKind::Read { lock: l, entry: 7, addr: 0x2af00, observed: 0 } });
        log.push(HistoryEvent { cycle: 9, agent: 0, txn_id: 1, kind: EventKind::Write { lock: l, entry: 7, addr: 0x2af00, value: 1 } });
        log.push(HistoryEvent { cycle: 9, agent: 0, txn_id: 1, kind: EventKind::Commit });
        log.push(HistoryEvent { cycle: 12, agent: 1, txn_id: 2, kind: EventKind::Abort { cause: AbortCause::Timeout } });
        log.push(HistoryEvent { cycle: 13, agent: 0, txn_id: 1, kind: EventKind::Release { lock: l, entry: 7 } });
        log
    }

    #[test]
    fn round_trip() {
        let log = sample();
        let text = log.to_text();
        assert!(text.starts_with("5 0 1 G abc SIX 100000007\n"));
        assert_eq!(HistoryLog::parse(&text).unwrap(), log);
    }

    #[test]
    fn hash_is_content_addressed() {
        assert_eq!(sample().hash(), sample().hash());
        assert_eq!(sample().hash().len(), 64);
        assert_ne!(sample().hash(), HistoryLog::new().hash());
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = HistoryLog::parse("1 0 1 C\n2 0 1 Q\n").unwrap_err();
        assert_eq!(err.line, 2);
        assert!(HistoryLog::parse("1 0 1 G zz S 0").is_err());
        assert!(HistoryLog::parse("1 0 1 A maybe").is_err());
    }

    #[test]
    #[should_panic(expected = "out of order")]
    fn push_enforces_order() {
        let mut log = HistoryLog::new();
        log.push(HistoryEvent { cycle: 4, agent: 1, txn_id: 0, kind: EventKind::Commit });
        log.push(HistoryEvent { cycle: 4, agent: 0, txn_id: 0, kind: EventKind::Commit });
    }
}
