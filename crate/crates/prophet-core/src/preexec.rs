//! Reconnaissance coalitions: pre-execution against a snapshot, the timing of
//! the three cooperation modes, byzantine profile corruption, and membership
//! churn driven by correction-phase feedback.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    execute_trace, mix, AccessKey, CoalitionId, Granularity, NodeId, Placement, ShardId, StateView,
    Step, StorageKey, Transaction, TransactionProfile, TxnId,
};
use crate::simnet::{transfer_time, NodeAssignment, SimConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CooperationMode {
    Sequential,
    Overlap,
    Parallel(u32),
}

impl fmt::Display for CooperationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CooperationMode::Sequential => f.write_str("sequential"),
            CooperationMode::Overlap => f.write_str("overlap"),
            CooperationMode::Parallel(p) => write!(f, "parallel:{p}"),
        }
    }
}

impl FromStr for CooperationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "sequential" => Ok(Self::Sequential),
            "overlap" => Ok(Self::Overlap),
            other => other
                .strip_prefix("parallel:")
                .and_then(|p| p.parse().ok())
                .map(Self::Parallel)
                .ok_or_else(|| {
                    Error::Config(format!(
                        "mode must be sequential, overlap or parallel:<p>, got {other:?}"
                    ))
                }),
        }
    }
}

impl Serialize for CooperationMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CooperationMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// One bucket of the transaction-id hash space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct HashRange {
    pub bucket: u32,
    pub buckets: u32,
}

impl HashRange {
    pub fn contains(&self, txn: TxnId) -> bool {
        bucket_of(txn, self.buckets) == self.bucket
    }
}

pub fn bucket_of(txn: TxnId, buckets: u32) -> u32 {
    (mix(txn.0, 0xc0a1) % u64::from(buckets.max(1))) as u32
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Coalition {
    pub id: CoalitionId,
    pub members: BTreeMap<ShardId, NodeId>,
    pub mode: CooperationMode,
    pub hash_range: HashRange,
}

impl Coalition {
    pub fn is_all_malicious(&self, assignment: &NodeAssignment) -> bool {
        self.members.values().all(|n| assignment.is_malicious(*n))
    }
}

/// Round-robin formation: coalition `k` takes the `k`-th node of every shard.
pub fn form_coalitions(
    n_coalitions: u32,
    assignment: &NodeAssignment,
    mode: CooperationMode,
) -> Vec<Coalition> {
    (0..n_coalitions)
        .map(|k| Coalition {
            id: CoalitionId(k),
            members: assignment
                .members
                .iter()
                .enumerate()
                .map(|(s, nodes)| (ShardId(s as u32), nodes[k as usize % nodes.len()]))
                .collect(),
            mode,
            hash_range: HashRange {
                bucket: k,
                buckets: n_coalitions,
            },
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreExecResult {
    pub profile: TransactionProfile,
    /// Completion offset of this transaction within the batch schedule.
    pub makespan_contribution: f64,
    /// Ground truth, never consulted by protocol logic.
    pub corrupted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreExecBatch {
    pub results: Vec<PreExecResult>,
    pub skipped: Vec<TxnId>,
    pub batch_makespan_ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TxnCost {
    pub compute_ms: f64,
    /// Round trips of every cross-shard call, serialized.
    pub comm_ms: f64,
}

pub fn txn_cost(txn: &Transaction, placement: &Placement, sim: &SimConfig) -> Result<TxnCost> {
    let mut ctx = txn.entry_contract().ok_or_else(|| Error::InvalidTransaction {
        txn: txn.id,
        reason: "empty trace".into(),
    })?;
    let mut comm_ms = 0.0;
    for step in &txn.trace {
        if let Step::Call {
            to,
            payload_bytes,
            return_bytes,
        } = step
        {
            if placement.shard(ctx)? != placement.shard(*to)? {
                comm_ms += transfer_time(u64::from(*payload_bytes), sim)
                    + transfer_time(u64::from(*return_bytes), sim);
            }
            ctx = *to;
        }
    }
    Ok(TxnCost {
        compute_ms: txn.compute_ms(),
        comm_ms,
    })
}

/// Per-transaction completion times under a cooperation mode.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    pub completion: Vec<f64>,
    pub makespan_ms: f64,
}

/// Two-stage schedule: computation then communication, where communication
/// of one transaction overlaps computation of the next.
fn overlap_schedule(costs: &[TxnCost]) -> Vec<f64> {
    let (mut cpu, mut link) = (0.0f64, 0.0f64);
    costs
        .iter()
        .map(|c| {
            cpu += c.compute_ms;
            if c.comm_ms > 0.0 {
                link = link.max(cpu) + c.comm_ms;
                link
            } else {
                cpu
            }
        })
        .collect()
}

pub fn simulate_timing(mode: CooperationMode, costs: &[TxnCost]) -> Result<Schedule> {
    let completion = match mode {
        CooperationMode::Sequential => {
            let mut t = 0.0;
            costs
                .iter()
                .map(|c| {
                    t += c.compute_ms + c.comm_ms;
                    t
                })
                .collect()
        }
        CooperationMode::Overlap => overlap_schedule(costs),
        CooperationMode::Parallel(0) => {
            return Err(Error::InvalidParam("parallel mode needs at least one lane".into()))
        }
        CooperationMode::Parallel(p) => {
            let p = p as usize;
            let mut completion = vec![0.0; costs.len()];
            for lane in 0..p.min(costs.len()) {
                let idx: Vec<usize> = (lane..costs.len()).step_by(p).collect();
                let lane_costs: Vec<TxnCost> = idx.iter().map(|i| costs[*i]).collect();
                for (i, t) in idx.iter().zip(overlap_schedule(&lane_costs)) {
                    completion[*i] = t;
                }
            }
            completion
        }
    };
    let makespan_ms = completion.iter().copied().fold(0.0, f64::max);
    Ok(Schedule {
        completion,
        makespan_ms,
    })
}

/// Everything a coalition needs besides its members and the snapshot.
#[derive(Debug, Clone, Copy)]
pub struct PreExecContext<'a> {
    pub placement: &'a Placement,
    pub assignment: &'a NodeAssignment,
    pub sim: &'a SimConfig,
    pub granularity: Granularity,
    pub base_round: u64,
}

/// Pre-executes a batch. Every transaction reads the same `snapshot`; writes
/// stay local to the transaction.
pub fn pre_execute(
    coalition: &Coalition,
    txns: &[Arc<Transaction>],
    snapshot: &mut impl StateView,
    ctx: PreExecContext<'_>,
) -> Result<PreExecBatch> {
    let mut results = Vec::new();
    let mut skipped = Vec::new();
    let mut costs = Vec::new();
    for txn in txns {
        let shards = crate::model::related_shards(txn, ctx.placement)?;
        if shards.iter().any(|s| !coalition.members.contains_key(s)) {
            skipped.push(txn.id);
            continue;
        }
        let out = execute_trace(txn, ctx.placement, ctx.granularity, snapshot)?;
        let mut profile = TransactionProfile {
            txn_id: txn.id,
            rw_set: out.rw_set,
            messages: out.messages,
            base_round: ctx.base_round,
            coalition: coalition.id,
        };
        let corrupt_on = shards
            .iter()
            .copied()
            .find(|s| ctx.assignment.is_malicious(coalition.members[s]));
        if let Some(shard) = corrupt_on {
            let seed = mix(mix(ctx.sim.rng_seed, txn.id.0), u64::from(coalition.id.0));
            corrupt_profile(&mut profile, txn, shard, ctx.placement, seed)?;
        }
        costs.push(txn_cost(txn, ctx.placement, ctx.sim)?);
        results.push(PreExecResult {
            profile,
            makespan_contribution: 0.0,
            corrupted: corrupt_on.is_some(),
        });
    }
    let schedule = simulate_timing(coalition.mode, &costs)?;
    for (r, t) in results.iter_mut().zip(&schedule.completion) {
        r.makespan_contribution = *t;
    }
    Ok(PreExecBatch {
        results,
        skipped,
        batch_makespan_ms: schedule.makespan_ms,
    })
}

enum Corruption {
    DropRead(AccessKey),
    DropWrite(AccessKey),
    AddWrite(AccessKey),
    PerturbReturn(usize),
}

/// Applies one deterministic corruption to the part of `profile` that the
/// member on `shard` is responsible for, so that shard's validation fails.
pub fn corrupt_profile(
    profile: &mut TransactionProfile,
    txn: &Transaction,
    shard: ShardId,
    placement: &Placement,
    seed: u64,
) -> Result<()> {
    let on_shard = |c| placement.shard(c).map(|s| s == shard).unwrap_or(false);
    let mut options: Vec<Corruption> = Vec::new();
    options.extend(
        profile
            .rw_set
            .reads
            .iter()
            .filter(|k| on_shard(k.contract()))
            .map(|k| Corruption::DropRead(*k)),
    );
    options.extend(
        profile
            .rw_set
            .writes
            .iter()
            .filter(|k| on_shard(k.contract()))
            .map(|k| Corruption::DropWrite(*k)),
    );
    options.extend(
        profile
            .messages
            .iter()
            .enumerate()
            .filter(|(_, m)| on_shard(m.to_contract))
            .map(|(i, _)| Corruption::PerturbReturn(i)),
    );
    if options.is_empty() {
        // The shard only runs compute steps: claim a write that never happens.
        let contract = txn
            .contracts()
            .into_iter()
            .find(|c| on_shard(*c))
            .ok_or_else(|| Error::Invariant(format!("{} does not touch {shard}", txn.id)))?;
        let bogus = match profile.rw_set.granularity {
            Granularity::ContractLevel => AccessKey::Contract(contract),
            Granularity::StateLevel => AccessKey::State(StorageKey {
                contract,
                slot: u32::MAX,
            }),
        };
        options.push(Corruption::AddWrite(bogus));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match &options[rng.random_range(0..options.len())] {
        Corruption::DropRead(k) => {
            profile.rw_set.reads.remove(k);
        }
        Corruption::DropWrite(k) => {
            profile.rw_set.writes.remove(k);
        }
        Corruption::AddWrite(k) => {
            profile.rw_set.writes.insert(*k);
        }
        Corruption::PerturbReturn(i) => {
            profile.messages[*i].return_value ^= 1 | rng.random::<u64>();
        }
    }
    Ok(())
}

/// A profile found invalid with these shards blaming the member they host.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorrectionFeedback {
    pub txn: TxnId,
    pub coalition: CoalitionId,
    pub invalid_shards: BTreeSet<ShardId>,
}

/// Local blacklists kept by honest nodes.
#[derive(Debug, Clone, Default)]
pub struct ChurnState {
    pub blacklist: BTreeMap<NodeId, BTreeSet<NodeId>>,
}

impl ChurnState {
    pub fn flagged_by(&self, node: NodeId, suspect: NodeId) -> bool {
        self.blacklist.get(&node).is_some_and(|b| b.contains(&suspect))
    }

    pub fn ever_flagged(&self, suspect: NodeId) -> bool {
        self.blacklist.values().any(|b| b.contains(&suspect))
    }
}

/// Honest members of a coalition that produced an invalid profile blacklist
/// the blamed members and re-form with replacements from the same shards,
/// preferring nodes nobody has flagged. Coalitions without honest members are
/// left as they are.
pub fn coalition_churn(
    coalitions: &mut [Coalition],
    feedback: &[CorrectionFeedback],
    assignment: &NodeAssignment,
    state: &mut ChurnState,
) -> usize {
    let mut replaced = 0;
    for fb in feedback {
        let Some(idx) = coalitions.iter().position(|c| c.id == fb.coalition) else {
            continue;
        };
        let blamed: Vec<(ShardId, NodeId)> = fb
            .invalid_shards
            .iter()
            .filter_map(|s| coalitions[idx].members.get(s).map(|n| (*s, *n)))
            .collect();
        let honest: Vec<NodeId> = coalitions[idx]
            .members
            .values()
            .copied()
            .filter(|n| !assignment.is_malicious(*n) && !blamed.iter().any(|(_, b)| b == n))
            .collect();
        if honest.is_empty() {
            continue;
        }
        for h in &honest {
            state
                .blacklist
                .entry(*h)
                .or_default()
                .extend(blamed.iter().map(|(_, b)| *b));
        }
        let in_use: BTreeSet<NodeId> = coalitions
            .iter()
            .flat_map(|c| c.members.values().copied())
            .collect();
        for (shard, old) in blamed {
            let pool = &assignment.members[shard.0 as usize];
            let acceptable = |n: &&NodeId| {
                **n != old
                    && !in_use.contains(n)
                    && !honest.iter().any(|h| state.flagged_by(*h, **n))
            };
            let pick = pool
                .iter()
                .filter(acceptable)
                .find(|n| !state.ever_flagged(**n))
                .or_else(|| pool.iter().find(acceptable));
            if let Some(new) = pick {
                coalitions[idx].members.insert(shard, *new);
                replaced += 1;
            }
        }
    }
    replaced
}
