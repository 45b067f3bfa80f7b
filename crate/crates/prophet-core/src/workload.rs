//! Synthetic contract-call workloads, the line-oriented trace format, and
//! contract placement.
//!
//! Trace format, one record per line:
//!
//! ```text
//! @contracts 4
//! 0 0.0 12 R(0,3) X(1.5) C(2,24,12) R(2,0) W(2,0)
//! 1 2.5 7 R(1,9) W(1,9)
//! ```
//!
//! A `@contracts N` directive declares contract ids `0..N` and must precede any
//! record. Each record is `txn_id issue_time_ms fee` followed by steps:
//! `R(c,s)` read, `W(c,s)` write, `X(ms)` compute, `C(c,payload,return)` call.
//! Blank lines and lines starting with `#` are ignored.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Zipf};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{mix, ContractId, Placement, ShardId, Step, StorageKey, Transaction, TxnId};

/// Probability of each inter-contract call count; index `k` is `P(k calls)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallCountDistribution {
    weights: Vec<f64>,
}

impl CallCountDistribution {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if weights.is_empty() || !(total > 0.0) || weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::InvalidParam(
                "call count weights must be non-negative with a positive sum".into(),
            ));
        }
        Ok(Self {
            weights: weights.iter().map(|w| w / total).collect(),
        })
    }

    /// Every transaction makes exactly `k` calls.
    pub fn point(k: usize) -> Self {
        let mut weights = vec![0.0; k + 1];
        weights[k] = 1.0;
        Self { weights }
    }

    /// `P(k) ∝ q^k` on `0..=max`, with `q` solved so the mean equals `mean`.
    pub fn truncated_geometric(mean: f64, max: usize) -> Result<Self> {
        if !(mean > 0.0 && mean < max as f64 / 2.0) {
            return Err(Error::InvalidParam(format!(
                "mean {mean} must lie in (0, {})",
                max as f64 / 2.0
            )));
        }
        let dist = |q: f64| {
            let w: Vec<f64> = (0..=max).map(|k| q.powi(k as i32)).collect();
            Self::new(w).expect("positive weights")
        };
        // The truncated mean increases with q on (0, 1].
        let (mut lo, mut hi) = (1e-9, 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if dist(mid).mean() < mean {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(dist(0.5 * (lo + hi)))
    }

    /// Default shape: mean 8.94 calls, truncated at 32.
    pub fn ethereum_like() -> Self {
        Self::truncated_geometric(8.94, 32).expect("valid constants")
    }

    pub fn mean(&self) -> f64 {
        self.weights
            .iter()
            .enumerate()
            .map(|(k, w)| k as f64 * w)
            .sum()
    }

    pub fn prob_more_than(&self, k: usize) -> f64 {
        self.weights.iter().skip(k + 1).sum()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

impl Default for CallCountDistribution {
    fn default() -> Self {
        Self::ethereum_like()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadParams {
    pub n_txns: usize,
    pub n_contracts: u32,
    pub call_counts: CallCountDistribution,
    /// Zipf exponent over contract popularity; 0 is uniform.
    pub hotness_skew: f64,
    pub slots_per_contract: u32,
    pub mean_compute_ms: f64,
    pub mean_payload_bytes: f64,
    pub mean_return_bytes: f64,
    /// Client issue rate; transaction `i` is issued at `i / arrival_tps`.
    pub arrival_tps: f64,
    pub rng_seed: u64,
}

impl Default for WorkloadParams {
    fn default() -> Self {
        Self {
            n_txns: 10_000,
            n_contracts: 1000,
            call_counts: CallCountDistribution::default(),
            hotness_skew: 1.0,
            slots_per_contract: 256,
            mean_compute_ms: 1.0,
            // Calibrated so the per-transaction cross-shard byte total spans
            // roughly 180 B at 2 shards to 320 B at 64 shards.
            mean_payload_bytes: 24.0,
            mean_return_bytes: 12.0,
            arrival_tps: 10.0,
            rng_seed: 1,
        }
    }
}

impl WorkloadParams {
    /// Default skew over half as many contracts: hot contracts take a larger
    /// share of every trace.
    pub fn conflict_heavy() -> Self {
        Self {
            n_contracts: 500,
            ..Self::default()
        }
    }

    /// Uniform contract popularity over the full slot space.
    pub fn uniform() -> Self {
        Self {
            hotness_skew: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_txns == 0 {
            return Err(Error::InvalidParam("n_txns must be positive".into()));
        }
        if self.n_contracts == 0 {
            return Err(Error::InvalidParam("n_contracts must be positive".into()));
        }
        if self.slots_per_contract == 0 {
            return Err(Error::InvalidParam("slots_per_contract must be positive".into()));
        }
        if !(self.hotness_skew >= 0.0) {
            return Err(Error::InvalidParam("hotness_skew must be >= 0".into()));
        }
        for (name, v) in [
            ("mean_compute_ms", self.mean_compute_ms),
            ("mean_payload_bytes", self.mean_payload_bytes),
            ("mean_return_bytes", self.mean_return_bytes),
            ("arrival_tps", self.arrival_tps),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParam(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Generates `n_txns` transactions. Output is a pure function of `params`.
pub fn generate(params: &WorkloadParams) -> Result<Vec<Transaction>> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed);
    let calls = WeightedIndex::new(params.call_counts.weights())
        .map_err(|e| Error::InvalidParam(e.to_string()))?;
    let zipf = Zipf::new(f64::from(params.n_contracts), params.hotness_skew)
        .map_err(|e| Error::InvalidParam(e.to_string()))?;
    let compute = Exp::new(1.0 / params.mean_compute_ms).expect("positive rate");
    let interval = 1000.0 / params.arrival_tps;

    let contract = |rng: &mut ChaCha8Rng| ContractId(zipf.sample(rng) as u32 - 1);
    let bytes = |rng: &mut ChaCha8Rng, mean: f64| {
        rng.random_range((mean * 0.5).max(1.0)..=mean * 1.5).round() as u32
    };

    let mut txns = Vec::with_capacity(params.n_txns);
    for i in 0..params.n_txns {
        let n_calls = calls.sample(&mut rng);
        let mut trace = Vec::new();
        let mut ctx = contract(&mut rng);
        for seg in 0..=n_calls {
            if seg > 0 {
                ctx = contract(&mut rng);
                trace.push(Step::Call {
                    to: ctx,
                    payload_bytes: bytes(&mut rng, params.mean_payload_bytes),
                    return_bytes: bytes(&mut rng, params.mean_return_bytes),
                });
            }
            segment(&mut rng, ctx, params, &compute, &mut trace);
        }
        txns.push(Transaction {
            id: TxnId(i as u64),
            issue_time_ms: i as f64 * interval,
            fee: rng.random_range(1..=100),
            trace,
        });
    }
    Ok(txns)
}

/// One contract's share of a trace: 1-2 reads, a compute step, 0-2 writes.
fn segment(
    rng: &mut ChaCha8Rng,
    ctx: ContractId,
    params: &WorkloadParams,
    compute: &Exp<f64>,
    trace: &mut Vec<Step>,
) {
    let slot = |rng: &mut ChaCha8Rng| StorageKey {
        contract: ctx,
        slot: rng.random_range(0..params.slots_per_contract),
    };
    for _ in 0..rng.random_range(1..=2) {
        trace.push(Step::Read(slot(rng)));
    }
    let cost = (compute.sample(rng) * 1000.0).round() / 1000.0;
    trace.push(Step::Compute { cost_ms: cost });
    let writes = match rng.random_range(0..10) {
        0..=2 => 0,
        3..=7 => 1,
        _ => 2,
    };
    for _ in 0..writes {
        trace.push(Step::Write(slot(rng)));
    }
}

/// Balanced hash-ranked placement. Contracts are ranked by a seeded hash and
/// dealt round-robin, so shard loads differ by at most one and the placement
/// for `2n` shards refines the one for `n`.
pub fn place_contracts(
    contracts: impl IntoIterator<Item = ContractId>,
    n_shards: u32,
    seed: u64,
) -> Result<Placement> {
    if n_shards == 0 {
        return Err(Error::InvalidParam("n_shards must be at least 1".into()));
    }
    let mut ranked: Vec<ContractId> = contracts.into_iter().collect::<BTreeSet<_>>().into_iter().collect();
    ranked.sort_by_key(|c| (mix(seed, u64::from(c.0)), c.0));
    let shard_of = ranked
        .into_iter()
        .enumerate()
        .map(|(rank, c)| (c, ShardId(rank as u32 % n_shards)))
        .collect();
    Ok(Placement { n_shards, shard_of })
}

/// Transactions read from a trace file plus the declared contract set.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceFile {
    pub contracts: BTreeSet<ContractId>,
    pub txns: Vec<Transaction>,
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<Vec<Transaction>> {
    Ok(load_trace_file(path)?.txns)
}

pub fn load_trace_file(path: impl AsRef<Path>) -> Result<TraceFile> {
    parse_trace(&std::fs::read_to_string(path)?)
}

pub fn save_trace(path: impl AsRef<Path>, n_contracts: u32, txns: &[Transaction]) -> Result<()> {
    std::fs::write(path, format_trace(n_contracts, txns))?;
    Ok(())
}

pub fn format_trace(n_contracts: u32, txns: &[Transaction]) -> String {
    let mut out = format!("@contracts {n_contracts}\n");
    for t in txns {
        write!(out, "{} {} {}", t.id.0, t.issue_time_ms, t.fee).unwrap();
        for s in &t.trace {
            match s {
                Step::Read(k) => write!(out, " R({},{})", k.contract.0, k.slot),
                Step::Write(k) => write!(out, " W({},{})", k.contract.0, k.slot),
                Step::Compute { cost_ms } => write!(out, " X({cost_ms})"),
                Step::Call {
                    to,
                    payload_bytes,
                    return_bytes,
                } => write!(out, " C({},{payload_bytes},{return_bytes})", to.0),
            }
            .unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn parse_trace(text: &str) -> Result<TraceFile> {
    let mut contracts: Option<BTreeSet<ContractId>> = None;
    let mut txns = Vec::new();
    let mut seen = BTreeSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let err = |reason: String| Error::TraceFormat {
            line: line_no,
            reason,
        };
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some(rest) = line.strip_prefix("@contracts") {
            let n: u32 = rest
                .trim()
                .parse()
                .map_err(|_| err(format!("bad contract count {:?}", rest.trim())))?;
            contracts = Some((0..n).map(ContractId).collect());
            continue;
        }
        let mut fields = line.split_whitespace();
        let mut next_num = |what: &str| {
            fields
                .next()
                .ok_or_else(|| err(format!("missing {what}")))
                .map(str::to_owned)
        };
        let id: u64 = next_num("txn_id")?
            .parse()
            .map_err(|_| err("bad txn_id".into()))?;
        let issue: f64 = next_num("issue_time")?
            .parse()
            .map_err(|_| err("bad issue_time".into()))?;
        let fee: u64 = next_num("fee")?.parse().map_err(|_| err("bad fee".into()))?;
        let steps_text: Vec<&str> = line.split_whitespace().skip(3).collect();
        let mut trace = Vec::with_capacity(steps_text.len());
        for tok in steps_text {
            trace.push(parse_step(tok).map_err(|r| err(format!("{tok}: {r}")))?);
        }
        let declared = contracts
            .as_ref()
            .ok_or_else(|| err("record before @contracts directive".into()))?;
        if let Some(c) = trace
            .iter()
            .filter_map(Step::contract)
            .find(|c| !declared.contains(c))
        {
            return Err(err(format!("unknown contract {c}")));
        }
        if !seen.insert(id) {
            return Err(err(format!("duplicate txn_id {id}")));
        }
        let txn = Transaction {
            id: TxnId(id),
            issue_time_ms: issue,
            fee,
            trace,
        };
        txn.validate().map_err(|e| err(e.to_string()))?;
        txns.push(txn);
    }
    Ok(TraceFile {
        contracts: contracts.unwrap_or_default(),
        txns,
    })
}

fn parse_step(tok: &str) -> std::result::Result<Step, String> {
    let (kind, rest) = tok.split_at(1);
    let args = rest
        .strip_prefix('(')
        .and_then(|r| r.strip_suffix(')'))
        .ok_or("expected K(args)")?;
    let parts: Vec<&str> = args.split(',').collect();
    let int = |s: &str| s.trim().parse::<u32>().map_err(|_| format!("bad integer {s:?}"));
    match (kind, parts.as_slice()) {
        ("R", [c, s]) => Ok(Step::Read(StorageKey::new(int(c)?, int(s)?))),
        ("W", [c, s]) => Ok(Step::Write(StorageKey::new(int(c)?, int(s)?))),
        ("X", [ms]) => {
            let cost_ms: f64 = ms.trim().parse().map_err(|_| format!("bad cost {ms:?}"))?;
            Ok(Step::Compute { cost_ms })
        }
        ("C", [c, p, r]) => Ok(Step::Call {
            to: ContractId(int(c)?),
            payload_bytes: int(p)?,
            return_bytes: int(r)?,
        }),
        _ => Err("unknown step".into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::related_shards;

    fn small(seed: u64) -> WorkloadParams {
        WorkloadParams {
            n_txns: 200,
            n_contracts: 50,
            rng_seed: seed,
            ..Default::default()
        }
    }

    #[test]
    fn default_distribution_matches_published_summary() {
        let d = CallCountDistribution::ethereum_like();
        assert!((d.mean() - 8.94).abs() < 1e-9);
        assert!(d.prob_more_than(2) >= 0.70, "{}", d.prob_more_than(2));
    }

    #[test]
    fn empirical_mean_calls_near_default() {
        let txns = generate(&WorkloadParams::default()).unwrap();
        let mean = txns.iter().map(|t| t.call_count() as f64).sum::<f64>() / txns.len() as f64;
        assert!((8.49..=9.39).contains(&mean), "{mean}");
    }

    #[test]
    fn zero_calls_means_single_shard() {
        let params = WorkloadParams {
            call_counts: CallCountDistribution::point(0),
            ..small(3)
        };
        let txns = generate(&params).unwrap();
        // Each contract on its own shard.
        let p = place_contracts((0..50).map(ContractId), 50, 9).unwrap();
        for t in &txns {
            assert_eq!(related_shards(t, &p).unwrap().len(), 1);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = format_trace(50, &generate(&small(7)).unwrap());
        let b = format_trace(50, &generate(&small(7)).unwrap());
        assert_eq!(a, b);
        assert_ne!(a, format_trace(50, &generate(&small(8)).unwrap()));
    }

    #[test]
    fn zero_contracts_or_txns_rejected() {
        assert!(generate(&WorkloadParams { n_contracts: 0, ..small(1) }).is_err());
        assert!(generate(&WorkloadParams { n_txns: 0, ..small(1) }).is_err());
    }

    #[test]
    fn single_shard_placement() {
        let p = place_contracts((0..10).map(ContractId), 1, 4).unwrap();
        assert!(p.shard_of.values().all(|s| *s == ShardId(0)));
        assert!(place_contracts((0..10).map(ContractId), 0, 4).is_err());
    }

    #[test]
    fn placement_is_balanced_over_seeds() {
        for seed in 0..100 {
            let p = place_contracts((0..1000).map(ContractId), 16, seed).unwrap();
            let mut load = [0u32; 16];
            p.shard_of.values().for_each(|s| load[s.0 as usize] += 1);
            let (max, min) = (*load.iter().max().unwrap(), *load.iter().min().unwrap());
            assert!(min > 0 && f64::from(max) / f64::from(min) <= 1.5);
        }
        let a = place_contracts((0..100).map(ContractId), 8, 5).unwrap();
        assert_eq!(a, place_contracts((0..100).map(ContractId), 8, 5).unwrap());
    }

    #[test]
    fn empty_trace_file() {
        let t = parse_trace("").unwrap();
        assert!(t.txns.is_empty());
    }

    #[test]
    fn undeclared_contract_fails_with_line_number() {
        let text = "@contracts 3\n0 0 1 R(0,1)\n1 0 1 R(1,1) C(7,10,4) R(7,0)\n";
        match parse_trace(text) {
            Err(Error::TraceFormat { line, reason }) => {
                assert_eq!(line, 3);
                assert!(reason.contains("C7"), "{reason}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_record_reports_line() {
        let text = "@contracts 3\n\n0 0 1 R(0,1\n";
        assert!(matches!(parse_trace(text), Err(Error::TraceFormat { line: 3, .. })));
        assert!(matches!(
            parse_trace("0 0 1 R(0,1)\n"),
            Err(Error::TraceFormat { line: 1, .. })
        ));
    }

    #[test]
    fn readme_example_parses() {
        let text = "@contracts 4\n0 0.0 12 R(0,3) X(1.5) C(2,24,12) R(2,0) W(2,0)\n1 2.5 7 R(1,9) W(1,9)\n";
        let t = parse_trace(text).unwrap();
        assert_eq!(t.txns.len(), 2);
        assert_eq!(t.txns[0].call_count(), 1);
    }

    #[test]
    fn save_load_round_trip() {
        let txns = generate(&small(11)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.txt");
        save_trace(&path, 50, &txns).unwrap();
        assert_eq!(load_trace(&path).unwrap(), txns);
    }
}
