//! Hierarchical lock modes and the messages exchanged between transaction
//! agents and lock agents.
//!
//! Modes are stored in hardware as a 3-bit field ordered (S, I, X). The
//! compatibility relation is the classic multi-granularity table: the row is
//! the requested mode, the column the mode currently granted.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LockMode {
    #[default]
    NL,
    IS,
    IX,
    S,
    SIX,
    X,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ModeError {
    #[error("invalid lock mode encoding {0:#05b}")]
    InvalidEncoding(u8),
    #[error("unknown lock mode `{0}`")]
    UnknownName(String),
}

const S_BIT: u8 = 0b100;
const I_BIT: u8 = 0b010;
const X_BIT: u8 = 0b001;

// Row = requested, column = granted, both in `LockMode::ALL` order.
const COMPAT: [[bool; 6]; 6] = [
    //  NL    IS     IX     S      SIX    X
    [true, true, true, true, true, true],        // NL
    [true, true, true, true, true, false],       // IS
    [true, true, true, false, false, false],     // IX
    [true, true, false, true, false, false],     // S
    [true, true, false, false, false, false],    // SIX
    [true, false, false, false, false, false],   // X
];

impl LockMode {
    pub const ALL: [LockMode; 6] = [
        LockMode::NL,
        LockMode::IS,
        LockMode::IX,
        LockMode::S,
        LockMode::SIX,
        LockMode::X,
    ];

    fn index(self) -> usize {
        self as usize
    }

    pub fn encode(self) -> u8 {
        match self {
            LockMode::NL => 0,
            LockMode::IS => S_BIT | I_BIT,
            LockMode::IX => I_BIT | X_BIT,
            LockMode::S => S_BIT,
            LockMode::SIX => S_BIT | I_BIT | X_BIT,
            LockMode::X => X_BIT,
        }
    }

    pub fn decode(bits: u8) -> Result<LockMode, ModeError> {
        match bits {
            0b000 => Ok(LockMode::NL),
            0b110 => Ok(LockMode::IS),
            0b011 => Ok(LockMode::IX),
            0b100 => Ok(LockMode::S),
            0b111 => Ok(LockMode::SIX),
            0b001 => Ok(LockMode::X),
            other => Err(ModeError::InvalidEncoding(other)),
        }
    }

    /// Whether a request in `self` can be granted next to a holder in `granted`.
    pub fn compatible_with(self, granted: LockMode) -> bool {
        COMPAT[self.index()][granted.index()]
    }

    /// Group mode of two co-holders: the weakest mode that conflicts with
    /// everything either of them conflicts with.
    ///
    /// Only meaningful for compatible pairs; incompatible pairs never share an
    /// entry. For those the result is still an upper bound (`X`).
    pub fn join(self, other: LockMode) -> LockMode {
        use LockMode::*;
        match (self, other) {
            (NL, m) | (m, NL) => m,
            (a, b) if a == b => a,
            (IS, m) | (m, IS) => m,
            (IX, S) | (S, IX) => SIX,
            (IX, SIX) | (SIX, IX) | (S, SIX) | (SIX, S) => SIX,
            _ => X,
        }
    }

    /// S and SIX read the row, X writes it; intent modes carry no data access.
    pub fn data_access(self) -> Option<AccessKind> {
        match self {
            LockMode::S | LockMode::SIX => Some(AccessKind::Read),
            LockMode::X => Some(AccessKind::Write),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LockMode::NL => "NL",
            LockMode::IS => "IS",
            LockMode::IX => "IX",
            LockMode::S => "S",
            LockMode::SIX => "SIX",
            LockMode::X => "X",
        }
    }
}

pub fn compatible(requested: LockMode, granted: LockMode) -> bool {
    requested.compatible_with(granted)
}

pub fn group_join(a: LockMode, b: LockMode) -> LockMode {
    a.join(b)
}

impl fmt::Display for LockMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LockMode {
    type Err = ModeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LockMode::ALL
            .iter()
            .copied()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| ModeError::UnknownName(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AccessKind {
    Read,
    Write,
}

/// Opaque 64-bit lock identifier. Workloads pack table/warehouse/row keys into it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LockId(pub u64);

impl fmt::Display for LockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#018x}", self.0)
    }
}

/// Identifies one transaction slot on one transaction agent. `generation`
/// increments every time the slot is reloaded, so responses addressed to an
/// earlier occupant can be recognised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SlotRef {
    pub agent: u16,
    pub slot: u16,
    pub generation: u32,
}

impl SlotRef {
    pub fn new(agent: u16, slot: u16, generation: u32) -> Self {
        Self {
            agent,
            slot,
            generation,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RequestKind {
    Get,
    /// `timeout` is set when the transaction gave up before the lock was
    /// granted, so the request may still sit in the waiting queue.
    Release { timeout: bool },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LockRequest {
    pub requester: SlotRef,
    pub lock_id: LockId,
    pub mode: LockMode,
    pub kind: RequestKind,
}

impl LockRequest {
    pub fn get(requester: SlotRef, lock_id: LockId, mode: LockMode) -> Self {
        Self {
            requester,
            lock_id,
            mode,
            kind: RequestKind::Get,
        }
    }

    pub fn release(requester: SlotRef, lock_id: LockId, mode: LockMode, timeout: bool) -> Self {
        Self {
            requester,
            lock_id,
            mode,
            kind: RequestKind::Release { timeout },
        }
    }

    pub fn is_get(&self) -> bool {
        matches!(self.kind, RequestKind::Get)
    }

    pub fn timeout_release(&self) -> bool {
        matches!(self.kind, RequestKind::Release { timeout: true })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ResponseKind {
    Granted,
    Waiting,
    Aborted,
    Released,
}

impl ResponseKind {
    pub const ALL: [ResponseKind; 4] = [
        ResponseKind::Granted,
        ResponseKind::Waiting,
        ResponseKind::Aborted,
        ResponseKind::Released,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ResponseKind::Granted => "granted",
            ResponseKind::Waiting => "waiting",
            ResponseKind::Aborted => "aborted",
            ResponseKind::Released => "released",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LockResponse {
    pub to: SlotRef,
    pub lock_id: LockId,
    pub mode: LockMode,
    pub kind: ResponseKind,
}

#[cfg(test)]
mod tests {
    use super::*;
    use LockMode::*;

    // Conflict set of a granted mode: the requested modes it refuses.
    fn conflict_set(granted: LockMode) -> Vec<LockMode> {
        LockMode::ALL
            .iter()
            .copied()
            .filter(|r| !COMPAT[r.index()][granted.index()])
            .collect()
    }

    // Brute-force join: smallest conflict superset of the union.
    fn join_oracle(a: LockMode, b: LockMode) -> LockMode {
        let mut union = conflict_set(a);
        for m in conflict_set(b) {
            if !union.contains(&m) {
                union.push(m);
            }
        }
        LockMode::ALL
            .iter()
            .copied()
            .filter(|m| {
                let cs = conflict_set(*m);
                union.iter().all(|u| cs.contains(u))
            })
            .min_by_key(|m| conflict_set(*m).len())
            .unwrap()
    }

    #[test]
    fn table_examples() {
        assert!(!compatible(IS, X));
        assert!(compatible(S, S));
        assert!(compatible(X, NL));
        assert!(compatible(SIX, IS));
    }

    #[test]
    fn encodings() {
        assert_eq!(IX.encode(), 0b011);
        assert_eq!(NL.encode(), 0b000);
        assert_eq!(LockMode::decode(0b111), Ok(SIX));
        assert_eq!(IS.encode(), 0b110);
        assert_eq!(S.encode(), 0b100);
        assert_eq!(X.encode(), 0b001);
        assert!(LockMode::decode(0b010).is_err());
        assert!(LockMode::decode(0b101).is_err());
        for m in LockMode::ALL {
            assert_eq!(LockMode::decode(m.encode()), Ok(m));
        }
    }

    #[test]
    fn matrix_shape() {
        for a in LockMode::ALL {
            assert!(compatible(NL, a) && compatible(a, NL));
            for b in LockMode::ALL {
                assert_eq!(compatible(a, b), compatible(b, a));
            }
            if a != NL {
                assert!(!compatible(X, a));
            }
        }
    }

    #[test]
    fn join_examples() {
        assert_eq!(group_join(NL, X), X);
        assert_eq!(group_join(IS, IX), IX);
        assert_eq!(group_join(IS, S), S);
    }

    #[test]
    fn join_matches_brute_force_on_compatible_pairs() {
        for a in LockMode::ALL {
            for b in LockMode::ALL {
                if compatible(a, b) {
                    assert_eq!(a.join(b), join_oracle(a, b), "{a} join {b}");
                }
            }
        }
    }

    #[test]
    fn join_is_sound_and_lattice_like() {
        for a in LockMode::ALL {
            assert_eq!(a.join(a), a);
            assert_eq!(a.join(NL), a);
            for b in LockMode::ALL {
                assert_eq!(a.join(b), b.join(a));
                if !compatible(a, b) {
                    continue;
                }
                let g = a.join(b);
                for r in LockMode::ALL {
                    if compatible(r, g) {
                        assert!(compatible(r, a) && compatible(r, b));
                    }
                }
            }
        }
    }

    #[test]
    fn bitwise_or_would_underlock() {
        // S|IS = 110 = IS, which would admit IX although S refuses it.
        let or = LockMode::decode(S.encode() | IS.encode()).unwrap();
        assert_eq!(or, IS);
        assert!(compatible(IX, or));
        assert!(!compatible(IX, S.join(IS)));
    }

    #[test]
    fn parse_names() {
        for m in LockMode::ALL {
            assert_eq!(m.as_str().parse::<LockMode>(), Ok(m));
        }
        assert!("Q".parse::<LockMode>().is_err());
    }
}
