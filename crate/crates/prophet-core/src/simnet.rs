//! Discrete-event substrate: event queue, link cost model, node-to-shard
//! assignment, the intra-shard consensus abstraction, and the committee
//! failure bound.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;

use num_bigint::BigUint;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Attestation, Issuer, NodeId, ShardId};

/// A byzantine fault threshold as an exact fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FaultThreshold {
    pub num: u32,
    pub den: u32,
}

impl FaultThreshold {
    pub const ONE_THIRD: Self = Self { num: 1, den: 3 };
    pub const ONE_HALF: Self = Self { num: 1, den: 2 };

    pub fn fraction(self) -> f64 {
        f64::from(self.num) / f64::from(self.den)
    }

    /// Whether `bad` out of `total` strictly exceeds the threshold.
    pub fn exceeded(self, bad: u64, total: u64) -> bool {
        bad * u64::from(self.den) > total * u64::from(self.num)
    }
}

impl fmt::Display for FaultThreshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl std::str::FromStr for FaultThreshold {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "1/3" => Ok(Self::ONE_THIRD),
            "1/2" => Ok(Self::ONE_HALF),
            other => Err(Error::Config(format!(
                "fault_threshold must be \"1/3\" or \"1/2\", got {other:?}"
            ))),
        }
    }
}

impl Serialize for FaultThreshold {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for FaultThreshold {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ConsensusLatency {
    Fixed { ms: f64 },
    LogNormal { median_ms: f64, sigma: f64 },
}

impl ConsensusLatency {
    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            ConsensusLatency::Fixed { ms } => ms,
            ConsensusLatency::LogNormal { median_ms, sigma } => LogNormal::new(median_ms.ln(), sigma)
                .expect("validated parameters")
                .sample(rng),
        }
    }

    pub fn median_ms(&self) -> f64 {
        match *self {
            ConsensusLatency::Fixed { ms } => ms,
            ConsensusLatency::LogNormal { median_ms, .. } => median_ms,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_shards: u32,
    pub nodes_per_shard: u32,
    pub link_latency_ms: f64,
    pub link_bandwidth_mbps: f64,
    pub consensus_latency: ConsensusLatency,
    pub fault_threshold: FaultThreshold,
    pub malicious_fraction: f64,
    pub security_lambda: u32,
    pub rng_seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_shards: 4,
            nodes_per_shard: 10,
            link_latency_ms: 100.0,
            link_bandwidth_mbps: 20.0,
            consensus_latency: ConsensusLatency::LogNormal {
                median_ms: 500.0,
                sigma: 0.5,
            },
            fault_threshold: FaultThreshold::ONE_THIRD,
            malicious_fraction: 0.0,
            security_lambda: 17,
            rng_seed: 1,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.n_shards == 0 {
            return bad("n_shards must be positive");
        }
        if self.nodes_per_shard == 0 {
            return bad("nodes_per_shard must be positive");
        }
        if !(self.link_latency_ms >= 0.0) || !(self.link_bandwidth_mbps > 0.0) {
            return bad("link latency must be >= 0 and bandwidth > 0");
        }
        if !(0.0..=1.0).contains(&self.malicious_fraction) {
            return bad("malicious_fraction must lie in [0, 1]");
        }
        match self.consensus_latency {
            ConsensusLatency::Fixed { ms } if !(ms >= 0.0) => bad("consensus latency must be >= 0"),
            ConsensusLatency::LogNormal { median_ms, sigma } if !(median_ms > 0.0 && sigma >= 0.0) => {
                bad("lognormal consensus latency needs median > 0 and sigma >= 0")
            }
            _ => Ok(()),
        }
    }

    /// True when the global malicious fraction is below the per-shard
    /// threshold; runs with `f >= v` are allowed but not meaningful.
    pub fn is_meaningful(&self) -> bool {
        self.malicious_fraction < self.fault_threshold.fraction()
    }
}

/// Milliseconds to push `bytes` over one link.
pub fn transfer_time(bytes: u64, config: &SimConfig) -> f64 {
    config.link_latency_ms + bytes as f64 * 8.0 / (config.link_bandwidth_mbps * 1000.0)
}

#[derive(Debug, Clone)]
pub struct SimEvent<K> {
    pub fire_time: f64,
    pub seq_no: u64,
    pub kind: K,
}

struct Queued<K>(SimEvent<K>);

impl<K> PartialEq for Queued<K> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl<K> Eq for Queued<K> {}
impl<K> PartialOrd for Queued<K> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl<K> Ord for Queued<K> {
    // Reversed: BinaryHeap is a max-heap.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .0
            .fire_time
            .total_cmp(&self.0.fire_time)
            .then(other.0.seq_no.cmp(&self.0.seq_no))
    }
}

/// Events fire in `(fire_time, seq_no)` order; `seq_no` is assigned at
/// scheduling time so equal-time events keep insertion order.
pub struct EventQueue<K> {
    heap: BinaryHeap<Queued<K>>,
    now: f64,
    next_seq: u64,
}

impl<K> Default for EventQueue<K> {
    fn default() -> Self {
        Self {
            heap: BinaryHeap::new(),
            now: 0.0,
            next_seq: 0,
        }
    }
}

impl<K> EventQueue<K> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn len(&self) -> usize {
        self.heap.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }

    pub fn schedule(&mut self, fire_time: f64, kind: K) -> Result<u64> {
        if !(fire_time >= self.now) {
            return Err(Error::ScheduleInPast {
                at: fire_time,
                now: self.now,
            });
        }
        let seq_no = self.next_seq;
        self.next_seq += 1;
        self.heap.push(Queued(SimEvent {
            fire_time,
            seq_no,
            kind,
        }));
        Ok(seq_no)
    }

    pub fn schedule_in(&mut self, delay: f64, kind: K) -> Result<u64> {
        self.schedule(self.now + delay.max(0.0), kind)
    }

    /// Next event, or `None` at end of simulation.
    #[allow(clippy::should_implement_trait)]
    pub fn next(&mut self) -> Option<SimEvent<K>> {
        let Queued(ev) = self.heap.pop()?;
        self.now = ev.fire_time;
        Some(ev)
    }
}

/// Running SHA-256 over processed events; two runs agree iff digests agree.
#[derive(Clone, Default)]
pub struct EventLog {
    hasher: Sha256,
    pub events: u64,
}

impl EventLog {
    pub fn record(&mut self, time: f64, seq: u64, what: &str) {
        self.hasher.update(time.to_bits().to_le_bytes());
        self.hasher.update(seq.to_le_bytes());
        self.hasher.update(what.as_bytes());
        self.events += 1;
    }

    pub fn digest_hex(&self) -> String {
        self.hasher
            .clone()
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeAssignment {
    pub shard_of: Vec<ShardId>,
    pub malicious: Vec<bool>,
    pub members: Vec<Vec<NodeId>>,
}

impl NodeAssignment {
    pub fn is_malicious(&self, node: NodeId) -> bool {
        self.malicious[node.0 as usize]
    }

    pub fn malicious_in(&self, shard: ShardId) -> usize {
        self.members[shard.0 as usize]
            .iter()
            .filter(|n| self.is_malicious(**n))
            .count()
    }
}

/// Uniform random partition of `n_shards * nodes_per_shard` nodes, with
/// malicious flags drawn i.i.d. with probability `malicious_fraction`.
pub fn assign_nodes(config: &SimConfig) -> NodeAssignment {
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed ^ 0xa551_9e00);
    let total = (config.n_shards * config.nodes_per_shard) as usize;
    let malicious: Vec<bool> = (0..total)
        .map(|_| rng.random_bool(config.malicious_fraction))
        .collect();
    let mut order: Vec<u32> = (0..total as u32).collect();
    order.shuffle(&mut rng);
    let mut shard_of = vec![ShardId(0); total];
    let members = order
        .chunks(config.nodes_per_shard as usize)
        .enumerate()
        .map(|(s, chunk)| {
            let mut nodes: Vec<NodeId> = chunk.iter().map(|n| NodeId(*n)).collect();
            nodes.sort();
            nodes.iter().for_each(|n| shard_of[n.0 as usize] = ShardId(s as u32));
            nodes
        })
        .collect();
    NodeAssignment {
        shard_of,
        malicious,
        members,
    }
}

/// One run of intra-shard consensus over `payload_digest`: a latency draw and
/// an attestation that is honest iff the shard's malicious share is within
/// the fault threshold.
pub fn run_consensus(
    issuer: Issuer,
    shard: ShardId,
    payload_digest: u64,
    assignment: &NodeAssignment,
    config: &SimConfig,
    rng: &mut impl Rng,
) -> (Attestation, f64) {
    let members = assignment.members[shard.0 as usize].len() as u64;
    let bad = assignment.malicious_in(shard) as u64;
    let honest = !config.fault_threshold.exceeded(bad, members);
    let latency = config.consensus_latency.sample(rng);
    (
        Attestation {
            issuer,
            honest,
            payload_digest,
        },
        latency,
    )
}

fn binomial(n: u64, k: u64) -> BigUint {
    if k > n {
        return BigUint::zero();
    }
    let k = k.min(n - k);
    let mut acc = BigUint::one();
    for i in 0..k {
        acc *= n - i;
        acc /= i + 1;
    }
    acc
}

/// Exact `P[X > v·m]` where `X` is the number of malicious nodes among `m`
/// drawn without replacement from `n` nodes of which `malicious` are bad.
pub fn shard_failure_probability(n: u64, m: u64, malicious: u64, v: FaultThreshold) -> Result<f64> {
    if m == 0 || m > n || malicious > n || v.den == 0 {
        return Err(Error::InvalidParam(format!(
            "need 0 < m <= n and malicious <= n (n={n}, m={m}, malicious={malicious})"
        )));
    }
    let hi = malicious.min(m);
    // Smallest k with k·den > m·num.
    let k_min = m * u64::from(v.num) / u64::from(v.den) + 1;
    if k_min > hi {
        return Ok(0.0);
    }
    let good = n - malicious;
    let mut tail = BigUint::zero();
    for k in k_min..=hi {
        if m - k > good {
            continue;
        }
        tail += binomial(malicious, k) * binomial(good, m - k);
    }
    let ratio = BigRational::new(tail.into(), binomial(n, m).into());
    Ok(ratio.to_f64().unwrap_or(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Issuer;

    #[test]
    fn equal_time_events_keep_insertion_order() {
        let mut q = EventQueue::new();
        q.schedule(5.0, "A").unwrap();
        q.schedule(5.0, "B").unwrap();
        assert_eq!(q.next().unwrap().kind, "A");
        assert_eq!(q.next().unwrap().kind, "B");
        assert!(q.next().is_none());
    }

    #[test]
    fn scheduling_in_the_past_fails() {
        let mut q = EventQueue::new();
        q.schedule(10.0, ()).unwrap();
        q.next();
        assert!(matches!(q.schedule(9.0, ()), Err(Error::ScheduleInPast { .. })));
        assert!(q.schedule(10.0, ()).is_ok());
    }

    #[test]
    fn random_events_dequeue_sorted() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut q = EventQueue::new();
        let mut expected = Vec::new();
        for i in 0..100_000u64 {
            let t = f64::from(rng.random_range(0..5000u32));
            let seq = q.schedule(t, i).unwrap();
            expected.push((t, seq));
        }
        expected.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let got: Vec<(f64, u64)> = std::iter::from_fn(|| q.next())
            .map(|e| (e.fire_time, e.seq_no))
            .collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn transfer_time_examples() {
        let c = SimConfig::default();
        assert_eq!(transfer_time(0, &c), 100.0);
        assert!((transfer_time(2_500_000, &c) - 1100.0).abs() < 1e-9);
        assert!((transfer_time(322, &c) - 100.1288).abs() < 1e-9);
    }

    fn assignment_with(bad: usize, total: usize) -> NodeAssignment {
        NodeAssignment {
            shard_of: vec![ShardId(0); total],
            malicious: (0..total).map(|i| i < bad).collect(),
            members: vec![(0..total as u32).map(NodeId).collect()],
        }
    }

    #[test]
    fn consensus_honesty_threshold() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut c = SimConfig {
            fault_threshold: FaultThreshold::ONE_HALF,
            ..Default::default()
        };
        let iss = Issuer::Shard(ShardId(0));
        let (a, _) = run_consensus(iss, ShardId(0), 7, &assignment_with(0, 50), &c, &mut rng);
        assert!(a.honest);
        let (a, _) = run_consensus(iss, ShardId(0), 7, &assignment_with(26, 50), &c, &mut rng);
        assert!(!a.honest);
        let (a, _) = run_consensus(iss, ShardId(0), 7, &assignment_with(25, 50), &c, &mut rng);
        assert!(a.honest);
        c.consensus_latency = ConsensusLatency::Fixed { ms: 500.0 };
        for _ in 0..10 {
            let (_, l) = run_consensus(iss, ShardId(0), 7, &assignment_with(0, 50), &c, &mut rng);
            assert_eq!(l, 500.0);
        }
    }

    #[test]
    fn assignment_is_seeded_and_sized() {
        let c = SimConfig {
            n_shards: 16,
            nodes_per_shard: 50,
            malicious_fraction: 0.125,
            ..Default::default()
        };
        let a = assign_nodes(&c);
        assert_eq!(a, assign_nodes(&c));
        assert!(a.members.iter().all(|m| m.len() == 50));
        let honest = assign_nodes(&SimConfig {
            malicious_fraction: 0.0,
            ..c.clone()
        });
        assert!(honest.malicious.iter().all(|m| !m));
    }

    #[test]
    fn malicious_per_shard_monte_carlo() {
        let mut total = 0usize;
        for seed in 0..100 {
            let a = assign_nodes(&SimConfig {
                n_shards: 16,
                nodes_per_shard: 50,
                malicious_fraction: 0.125,
                rng_seed: seed,
                ..Default::default()
            });
            total += (0..16).map(|s| a.malicious_in(ShardId(s))).sum::<usize>();
        }
        let mean = total as f64 / (100.0 * 16.0);
        assert!((mean - 6.25).abs() / 6.25 < 0.10, "{mean}");
    }

    #[test]
    fn failure_probability_degenerate_cases() {
        let v = FaultThreshold::ONE_THIRD;
        assert_eq!(shard_failure_probability(800, 50, 0, v).unwrap(), 0.0);
        assert_eq!(shard_failure_probability(90, 90, 31, v).unwrap(), 1.0);
        assert_eq!(shard_failure_probability(90, 90, 30, v).unwrap(), 0.0);
        assert!(shard_failure_probability(10, 11, 1, v).is_err());
        assert!(shard_failure_probability(10, 5, 11, v).is_err());
    }

    #[test]
    fn failure_probability_nonincreasing_in_shard_size() {
        let v = FaultThreshold::ONE_THIRD;
        let mut prev = 1.0;
        for m in (30..=400).step_by(10) {
            let p = shard_failure_probability(800, m, 100, v).unwrap();
            assert!(p <= prev + 1e-15, "m={m}: {p} > {prev}");
            prev = p;
        }
    }
}
