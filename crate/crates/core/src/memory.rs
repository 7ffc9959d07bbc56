//! Sparse simulated memory. Every byte starts at zero; only touched 64-byte
//! chunks are stored.

use std::collections::HashMap;

use thiserror::Error;

use crate::lock::AccessKind;

pub const CHUNK_BYTES: u64 = 64;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MemoryError {
    #[error("zero-length access at {0:#x}")]
    ZeroLength(u64),
    #[error("access {addr:#x}+{len} outside memory span {span:#x}")]
    OutOfRange { addr: u64, len: u64, span: u64 },
    #[error("write of {got} bytes does not match access length {want}")]
    LengthMismatch { want: u64, got: u64 },
}

#[derive(Debug, Clone)]
pub struct Memory {
    span: u64,
    latency: u64,
    chunks: HashMap<u64, Box<[u8; CHUNK_BYTES as usize]>>,
}

impl Memory {
    pub fn new(span: u64, latency: u64) -> Self {
        Self {
            span,
            latency,
            chunks: HashMap::new(),
        }
    }

    pub fn span(&self) -> u64 {
        self.span
    }

    pub fn latency(&self) -> u64 {
        self.latency
    }

    fn check(&self, addr: u64, len: u64) -> Result<(), MemoryError> {
        if len == 0 {
            return Err(MemoryError::ZeroLength(addr));
        }
        match addr.checked_add(len) {
            Some(end) if end <= self.span => Ok(()),
            _ => Err(MemoryError::OutOfRange { addr, len, span: self.span }),
        }
    }

    /// Cycles for one access: the latency plus one cycle per extra chunk.
    pub fn access_cycles(&self, len: u64) -> u64 {
        self.latency + len.div_ceil(CHUNK_BYTES).saturating_sub(1)
    }

    /// Completion cycle of an access issued at `now`.
    pub fn memory_access(&self, addr: u64, len: u64, _kind: AccessKind, now: u64) -> Result<u64, MemoryError> {
        self.check(addr, len)?;
        Ok(now + self.access_cycles(len))
    }

    pub fn read(&self, addr: u64, len: u64) -> Result<Vec<u8>, MemoryError> {
        self.check(addr, len)?;
        let mut out = Vec::with_capacity(len as usize);
        for a in addr..addr + len {
            let byte = self
                .chunks
                .get(&(a / CHUNK_BYTES))
                .map_or(0, |c| c[(a % CHUNK_BYTES) as usize]);
            out.push(byte);
        }
        Ok(out)
    }

    pub fn write(&mut self, addr: u64, bytes: &[u8]) -> Result<(), MemoryError> {
        self.check(addr, bytes.len() as u64)?;
        for (k, &b) in bytes.iter().enumerate() {
            let a = addr + k as u64;
            let chunk = self
                .chunks
                .entry(a / CHUNK_BYTES)
                .or_insert_with(|| Box::new([0; CHUNK_BYTES as usize]));
            chunk[(a % CHUNK_BYTES) as usize] = b;
        }
        Ok(())
    }

    /// Reads the 8-byte little-endian stamp at the start of a row.
    pub fn read_version(&self, addr: u64, len: u32) -> Result<u64, MemoryError> {
        let bytes = self.read(addr, len as u64)?;
        let mut v = [0u8; 8];
        let n = bytes.len().min(8);
        v[..n].copy_from_slice(&bytes[..n]);
        Ok(u64::from_le_bytes(v))
    }

    /// Overwrites a row with a synthetic pattern stamped with `version`.
    pub fn write_version(&mut self, addr: u64, len: u32, version: u64) -> Result<(), MemoryError> {
        let pattern = version.to_le_bytes();
        let bytes: Vec<u8> = (0..len as usize).map(|i| pattern[i % 8]).collect();
        self.write(addr, &bytes)
    }

    pub fn touched_chunks(&self) -> usize {
        self.chunks.len()
    }
}
