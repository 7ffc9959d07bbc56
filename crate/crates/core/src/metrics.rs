//! Run metrics and histograms.

use serde::{Deserialize, Serialize};

use crate::lock::ResponseKind;

/// Log2-bucketed histogram: bucket `k` holds values in `[2^(k-1), 2^k)`,
/// bucket 0 holds zero.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Histogram {
    pub count: u64,
    pub sum: u64,
    pub min: Option<u64>,
    pub max: Option<u64>,
    pub buckets: Vec<u64>,
}

impl Histogram {
    pub fn record(&mut self, v: u64) {
        self.count += 1;
        self.sum += v;
        self.min = Some(self.min.map_or(v, |m| m.min(v)));
        self.max = Some(self.max.map_or(v, |m| m.max(v)));
        let b = (u64::BITS - v.leading_zeros()) as usize;
        if self.buckets.len() <= b {
            self.buckets.resize(b + 1, 0);
        }
        self.buckets[b] += 1;
    }

    pub fn merge(&mut self, other: &Histogram) {
        self.count += other.count;
        self.sum += other.sum;
        self.min = match (self.min, other.min) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
        self.max = self.max.max(other.max);
        if self.buckets.len() < other.buckets.len() {
            self.buckets.resize(other.buckets.len(), 0);
        }
        for (a, b) in self.buckets.iter_mut().zip(&other.buckets) {
            *a += b;
        }
    }

    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum as f64 / self.count as f64
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub cycles: u64,
    pub committed: u64,
    pub aborted: u64,
    pub aborted_timeout: u64,
    pub aborted_denied: u64,
    pub txn_latency: Histogram,
    pub responses: [u64; 4],
    pub response_latency: [Histogram; 4],
    pub locks_served: Vec<u64>,
    pub spurious_releases: u64,
    pub stale_responses: u64,
    pub gets_sent: u64,
    pub releases_sent: u64,
    pub lock_requests_per_txn: f64,
    pub txn_agents: usize,
    pub freq_mhz: f64,
}

impl RunMetrics {
    pub fn total(&self) -> u64 {
        self.committed + self.aborted
    }

    pub fn abort_rate(&self) -> f64 {
        if self.total() == 0 {
            0.0
        } else {
            self.aborted as f64 / self.total() as f64
        }
    }

    pub fn response_count(&self, kind: ResponseKind) -> u64 {
        self.responses[kind.index()]
    }

    pub fn seconds(&self) -> f64 {
        self.cycles as f64 / (self.freq_mhz * 1e6)
    }

    pub fn throughput(&self) -> Throughput {
        throughput(self, self.freq_mhz)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    /// Committed plus aborted transactions per second.
    pub txn_per_s: f64,
    pub committed_per_s: f64,
    pub txn_per_s_per_agent: f64,
    pub committed_per_s_per_agent: f64,
    pub lock_per_s: f64,
}

/// Converts cycles to wall-clock rates at `freq_mhz`. Aborted transactions
/// count towards `txn_per_s`; `committed_per_s` excludes them.
pub fn throughput(m: &RunMetrics, freq_mhz: f64) -> Throughput {
    if m.cycles == 0 {
        return Throughput {
            txn_per_s: 0.0,
            committed_per_s: 0.0,
            txn_per_s_per_agent: 0.0,
            committed_per_s_per_agent: 0.0,
            lock_per_s: 0.0,
        };
    }
    let secs = m.cycles as f64 / (freq_mhz * 1e6);
    let agents = m.txn_agents.max(1) as f64;
    let txn = m.total() as f64 / secs;
    let committed = m.committed as f64 / secs;
    let locks = (m.response_count(ResponseKind::Granted) + m.response_count(ResponseKind::Released)) as f64;
    Throughput {
        txn_per_s: txn,
        committed_per_s: committed,
        txn_per_s_per_agent: txn / agents,
        committed_per_s_per_agent: committed / agents,
        lock_per_s: locks / secs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_buckets() {
        let mut h = Histogram::default();
        for v in [0, 1, 2, 3, 4, 1000] {
            h.record(v);
        }
        assert_eq!(h.count, 6);
        assert_eq!(h.min, Some(0));
        assert_eq!(h.max, Some(1000));
        assert_eq!(&h.buckets[..4], &[1, 1, 2, 1]);
        assert_eq!(h.buckets[10], 1);
        let mut g = Histogram::default();
        g.record(7);
        g.merge(&h);
        assert_eq!(g.count, 7);
        assert_eq!(g.min, Some(0));
    }

    #[test]
    fn throughput_arithmetic() {
        let m = RunMetrics {
            cycles: 1_000_000,
            committed: 390,
            aborted: 10,
            txn_agents: 1,
            freq_mhz: 200.0,
            ..RunMetrics::default()
        };
        let t = m.throughput();
        assert!((t.txn_per_s - 80_000.0).abs() < 1e-6);
        assert!((t.committed_per_s - 78_000.0).abs() < 1e-6);
        let t2 = throughput(&m, 400.0);
        assert!((t2.txn_per_s - 160_000.0).abs() < 1e-6);
        assert!((m.abort_rate() - 0.025).abs() < 1e-12);
        assert_eq!(throughput(&RunMetrics::default(), 200.0).txn_per_s, 0.0);
    }
}
