//! Domain types shared by every phase: transactions, read/write sets,
//! profiles, orders, blocks, proofs and contract placement.
//!
//! Contract logic is abstract. A transaction is a trace of steps; the value a
//! `Write` stores and the parameters of a cross-shard call are a deterministic
//! function of the transaction id, the step index and every value read so far.
//! That is all later phases need: re-execution is reproducible, and any change
//! in an observed read shows up in the values that cross shard boundaries.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

macro_rules! id_newtype {
    ($name:ident, $inner:ty, $prefix:literal) => {
        #[derive(
            Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
        )]
        #[serde(transparent)]
        pub struct $name(pub $inner);

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, concat!($prefix, "{}"), self.0)
            }
        }
    };
}

id_newtype!(ContractId, u32, "C");
id_newtype!(ShardId, u32, "S");
id_newtype!(TxnId, u64, "T");
id_newtype!(NodeId, u32, "N");
id_newtype!(CoalitionId, u32, "K");

pub type Round = u64;
pub type Value = u64;

/// A storage slot of one contract.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StorageKey {
    pub contract: ContractId,
    pub slot: u32,
}

impl StorageKey {
    pub fn new(contract: u32, slot: u32) -> Self {
        Self {
            contract: ContractId(contract),
            slot,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Step {
    Compute { cost_ms: f64 },
    Read(StorageKey),
    Write(StorageKey),
    /// Inter-contract call. Execution continues in `to` for the following steps.
    Call {
        to: ContractId,
        payload_bytes: u32,
        return_bytes: u32,
    },
}

impl Step {
    pub fn contract(&self) -> Option<ContractId> {
        match self {
            Step::Compute { .. } => None,
            Step::Read(k) | Step::Write(k) => Some(k.contract),
            Step::Call { to, .. } => Some(*to),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transaction {
    pub id: TxnId,
    pub issue_time_ms: f64,
    pub fee: u64,
    pub trace: Vec<Step>,
}

impl Transaction {
    /// The contract named by the first step.
    pub fn entry_contract(&self) -> Option<ContractId> {
        self.trace.first().and_then(Step::contract)
    }

    /// Checks the structural invariants of a trace: non-empty, the first step
    /// names a contract, and every storage access targets the contract that is
    /// executing at that point.
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::InvalidTransaction {
            txn: self.id,
            reason,
        };
        let Some(mut ctx) = self.entry_contract() else {
            return Err(bad("trace must start with a step naming a contract".into()));
        };
        for (i, step) in self.trace.iter().enumerate() {
            match step {
                Step::Read(k) | Step::Write(k) if k.contract != ctx => {
                    return Err(bad(format!(
                        "step {i} accesses {} while executing in {ctx}",
                        k.contract
                    )));
                }
                Step::Compute { cost_ms } if !(cost_ms.is_finite() && *cost_ms >= 0.0) => {
                    return Err(bad(format!("step {i} has invalid cost {cost_ms}")));
                }
                Step::Call { to, .. } => ctx = *to,
                _ => {}
            }
        }
        Ok(())
    }

    /// Every contract the trace references, entry contract included.
    pub fn contracts(&self) -> BTreeSet<ContractId> {
        self.trace.iter().filter_map(Step::contract).collect()
    }

    pub fn compute_ms(&self) -> f64 {
        self.trace
            .iter()
            .map(|s| match s {
                Step::Compute { cost_ms } => *cost_ms,
                _ => 0.0,
            })
            .sum()
    }

    pub fn call_count(&self) -> usize {
        self.trace
            .iter()
            .filter(|s| matches!(s, Step::Call { .. }))
            .count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    ContractLevel,
    StateLevel,
}

/// An element of a read/write set: a whole contract or a single slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AccessKey {
    Contract(ContractId),
    State(StorageKey),
}

impl AccessKey {
    pub fn contract(&self) -> ContractId {
        match self {
            AccessKey::Contract(c) => *c,
            AccessKey::State(k) => k.contract,
        }
    }

    pub fn at(key: StorageKey, granularity: Granularity) -> Self {
        match granularity {
            Granularity::ContractLevel => AccessKey::Contract(key.contract),
            Granularity::StateLevel => AccessKey::State(key),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ReadWriteSet {
    pub granularity: Granularity,
    pub reads: BTreeSet<AccessKey>,
    pub writes: BTreeSet<AccessKey>,
}

impl ReadWriteSet {
    pub fn empty(granularity: Granularity) -> Self {
        Self {
            granularity,
            reads: BTreeSet::new(),
            writes: BTreeSet::new(),
        }
    }

    pub fn record_read(&mut self, key: StorageKey) {
        self.reads.insert(AccessKey::at(key, self.granularity));
    }

    pub fn record_write(&mut self, key: StorageKey) {
        self.writes.insert(AccessKey::at(key, self.granularity));
    }

    /// Projects a state-level set to contract level. Contract-level sets are
    /// returned unchanged.
    pub fn to_contract_level(&self) -> Self {
        let project = |s: &BTreeSet<AccessKey>| {
            s.iter()
                .map(|k| AccessKey::Contract(k.contract()))
                .collect()
        };
        Self {
            granularity: Granularity::ContractLevel,
            reads: project(&self.reads),
            writes: project(&self.writes),
        }
    }

    pub fn at_granularity(&self, granularity: Granularity) -> Result<Self> {
        match (self.granularity, granularity) {
            (a, b) if a == b => Ok(self.clone()),
            (Granularity::StateLevel, Granularity::ContractLevel) => Ok(self.to_contract_level()),
            (a, b) => Err(Error::GranularityMismatch(a, b)),
        }
    }

    /// Keys in this set whose contract satisfies `keep`.
    pub fn restricted(&self, mut keep: impl FnMut(ContractId) -> bool) -> Self {
        Self {
            granularity: self.granularity,
            reads: self.reads.iter().copied().filter(|k| keep(k.contract())).collect(),
            writes: self.writes.iter().copied().filter(|k| keep(k.contract())).collect(),
        }
    }

    pub fn all_keys(&self) -> impl Iterator<Item = &AccessKey> {
        self.reads.iter().chain(self.writes.iter())
    }

    pub fn len(&self) -> usize {
        self.reads.len() + self.writes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reads.is_empty() && self.writes.is_empty()
    }
}

/// Projection of a trace onto the storage it touches.
pub fn extract_rw_set(trace: &[Step], granularity: Granularity) -> ReadWriteSet {
    let mut rw = ReadWriteSet::empty(granularity);
    for step in trace {
        match step {
            Step::Read(k) => rw.record_read(*k),
            Step::Write(k) => rw.record_write(*k),
            _ => {}
        }
    }
    rw
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DependencyRule {
    /// Admit only transactions whose read/write sets are disjoint from all
    /// earlier admitted ones.
    Disjoint,
    /// Admit read-after-read and write-after-read dependencies.
    RwDependency,
}

/// Whether `later` may not follow `earlier` in one global order.
pub fn conflicts(earlier: &ReadWriteSet, later: &ReadWriteSet, rule: DependencyRule) -> Result<bool> {
    if earlier.granularity != later.granularity {
        return Err(Error::GranularityMismatch(
            earlier.granularity,
            later.granularity,
        ));
    }
    Ok(match rule {
        DependencyRule::Disjoint => earlier
            .all_keys()
            .any(|k| later.reads.contains(k) || later.writes.contains(k)),
        DependencyRule::RwDependency => earlier
            .writes
            .iter()
            .any(|k| later.reads.contains(k) || later.writes.contains(k)),
    })
}

/// Contract-to-shard assignment for one epoch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Placement {
    pub n_shards: u32,
    pub shard_of: BTreeMap<ContractId, ShardId>,
}

impl Placement {
    pub fn shard(&self, contract: ContractId) -> Result<ShardId> {
        self.shard_of
            .get(&contract)
            .copied()
            .ok_or(Error::UnplacedContract(contract))
    }

    pub fn shards(&self) -> impl Iterator<Item = ShardId> {
        (0..self.n_shards).map(ShardId)
    }

    pub fn contracts_on(&self, shard: ShardId) -> impl Iterator<Item = ContractId> + '_ {
        self.shard_of
            .iter()
            .filter(move |(_, s)| **s == shard)
            .map(|(c, _)| *c)
    }
}

/// Shards owning any contract the transaction references.
pub fn related_shards(txn: &Transaction, placement: &Placement) -> Result<BTreeSet<ShardId>> {
    txn.contracts()
        .into_iter()
        .map(|c| placement.shard(c))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CrossShardMessage {
    pub seq: u32,
    pub from_contract: ContractId,
    pub to_contract: ContractId,
    pub payload_bytes: u32,
    /// Call parameters as observed by the caller.
    pub params: Value,
    pub return_value: Value,
    pub return_bytes: u32,
}

impl CrossShardMessage {
    pub fn total_bytes(&self) -> u64 {
        u64::from(self.payload_bytes) + u64::from(self.return_bytes)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TransactionProfile {
    pub txn_id: TxnId,
    pub rw_set: ReadWriteSet,
    pub messages: Vec<CrossShardMessage>,
    pub base_round: Round,
    pub coalition: CoalitionId,
}

impl TransactionProfile {
    pub fn message_bytes(&self) -> u64 {
        self.messages.iter().map(CrossShardMessage::total_bytes).sum()
    }
}

#[derive(Debug, Clone)]
pub struct OrderEntry {
    pub position: u32,
    pub txn: Arc<Transaction>,
    pub profile: Arc<TransactionProfile>,
}

#[derive(Debug, Clone)]
pub struct GlobalOrder {
    pub round: Round,
    pub entries: Vec<OrderEntry>,
}

impl GlobalOrder {
    pub fn txn_ids(&self) -> Vec<TxnId> {
        self.entries.iter().map(|e| e.txn.id).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Issuer {
    Shard(ShardId),
    /// The sequence shard acting as validator of its own order.
    Sequencer(ShardId),
    Coalition(CoalitionId),
}

/// Logical stand-in for a collective signature. Only the consensus
/// abstraction in `simnet` creates these.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Attestation {
    pub issuer: Issuer,
    pub honest: bool,
    pub payload_digest: u64,
}

#[derive(Debug, Clone)]
pub struct Block {
    pub shard: ShardId,
    pub round: Round,
    pub txns: Vec<OrderEntry>,
    pub attestation: Attestation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InvalidReason {
    /// Read/write set or message structure differs from the profile.
    Mismatch,
    /// Message values differ and the shard holds writes newer than the
    /// profile's base round.
    Stale,
    /// The order itself violates the admission rule.
    OrderViolation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Verdict {
    Valid,
    Invalid(InvalidReason),
}

impl Verdict {
    pub fn is_valid(&self) -> bool {
        matches!(self, Verdict::Valid)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictEntry {
    pub verdict: Verdict,
    /// Last writers of the keys this transaction touched on the issuing shard.
    pub predecessors: Vec<Sequenced>,
}

/// A transaction as sequenced in one particular round. A transaction that is
/// invalidated and retried appears again under a later round.
pub type Sequenced = (Round, TxnId);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Proof {
    pub issuer: Issuer,
    pub round: Round,
    pub verdicts: BTreeMap<TxnId, VerdictEntry>,
    pub attestation: Attestation,
}

impl Proof {
    pub fn digest(issuer: Issuer, round: Round, verdicts: &BTreeMap<TxnId, VerdictEntry>) -> u64 {
        let tag = match issuer {
            Issuer::Shard(s) => mix(1, u64::from(s.0)),
            Issuer::Sequencer(s) => mix(2, u64::from(s.0)),
            Issuer::Coalition(c) => mix(3, u64::from(c.0)),
        };
        let mut acc = mix(tag, round);
        for (id, e) in verdicts {
            let v = match e.verdict {
                Verdict::Valid => 0,
                Verdict::Invalid(InvalidReason::Mismatch) => 1,
                Verdict::Invalid(InvalidReason::Stale) => 2,
                Verdict::Invalid(InvalidReason::OrderViolation) => 3,
            };
            acc = mix(mix(acc, id.0), v);
            for (r, t) in &e.predecessors {
                acc = mix(mix(acc, *r), t.0);
            }
        }
        acc
    }

    /// Approximate wire size: a verdict bitmap, predecessor ids and a digest.
    pub fn wire_bytes(&self) -> u64 {
        let preds: usize = self.verdicts.values().map(|e| e.predecessors.len()).sum();
        32 + (self.verdicts.len() as u64).div_ceil(4) + 16 * preds as u64
    }
}

/// 64-bit mixing function used for every derived value.
pub fn mix(a: u64, b: u64) -> u64 {
    splitmix(a ^ splitmix(b.wrapping_add(0x9e37_79b9_7f4a_7c15)))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Value every slot holds before any transaction wrote it.
pub fn genesis_value(key: StorageKey) -> Value {
    mix(u64::from(key.contract.0) << 32 | u64::from(key.slot), 0x6e6e)
}

fn key_tag(key: StorageKey) -> u64 {
    u64::from(key.contract.0) << 32 | u64::from(key.slot)
}

pub(crate) fn seed_acc(txn: TxnId) -> Value {
    mix(txn.0, 0x5eed)
}

pub(crate) fn step_compute(acc: Value, index: usize) -> Value {
    mix(acc, index as u64)
}

pub(crate) fn step_read(acc: Value, key: StorageKey, value: Value) -> Value {
    mix(mix(acc, key_tag(key)), value)
}

pub(crate) fn write_value(acc: Value, index: usize, txn: TxnId) -> Value {
    mix(mix(acc, index as u64), txn.0)
}

pub(crate) fn step_write(acc: Value, written: Value) -> Value {
    mix(acc, written)
}

pub(crate) fn step_call(acc: Value, to: ContractId) -> Value {
    mix(acc, u64::from(to.0) | 1 << 40)
}

/// Read access to some version of world state.
pub trait StateView {
    fn read(&mut self, key: StorageKey) -> Value;
}

impl StateView for BTreeMap<StorageKey, Value> {
    fn read(&mut self, key: StorageKey) -> Value {
        self.get(&key).copied().unwrap_or_else(|| genesis_value(key))
    }
}

/// Result of executing a whole trace against one state.
#[derive(Debug, Clone, PartialEq)]
pub struct ExecOutcome {
    pub rw_set: ReadWriteSet,
    /// Final value per written key.
    pub writes: BTreeMap<StorageKey, Value>,
    pub messages: Vec<CrossShardMessage>,
}

/// Executes a trace monolithically. Writes are buffered locally so the state is
/// only read, never modified.
pub fn execute_trace(
    txn: &Transaction,
    placement: &Placement,
    granularity: Granularity,
    state: &mut impl StateView,
) -> Result<ExecOutcome> {
    let mut ctx = txn.entry_contract().ok_or_else(|| Error::InvalidTransaction {
        txn: txn.id,
        reason: "empty trace".into(),
    })?;
    let mut acc = seed_acc(txn.id);
    let mut rw = ReadWriteSet::empty(granularity);
    let mut writes = BTreeMap::new();
    let mut messages: Vec<CrossShardMessage> = Vec::new();
    for (i, step) in txn.trace.iter().enumerate() {
        match step {
            Step::Compute { .. } => acc = step_compute(acc, i),
            Step::Read(k) => {
                let v = match writes.get(k) {
                    Some(v) => *v,
                    None => state.read(*k),
                };
                rw.record_read(*k);
                acc = step_read(acc, *k, v);
            }
            Step::Write(k) => {
                let v = write_value(acc, i, txn.id);
                writes.insert(*k, v);
                rw.record_write(*k);
                acc = step_write(acc, v);
            }
            Step::Call {
                to,
                payload_bytes,
                return_bytes,
            } => {
                if placement.shard(ctx)? != placement.shard(*to)? {
                    if let Some(last) = messages.last_mut() {
                        last.return_value = acc;
                    }
                    messages.push(CrossShardMessage {
                        seq: messages.len() as u32,
                        from_contract: ctx,
                        to_contract: *to,
                        payload_bytes: *payload_bytes,
                        params: acc,
                        return_value: 0,
                        return_bytes: *return_bytes,
                    });
                }
                acc = step_call(acc, *to);
                ctx = *to;
            }
        }
    }
    if let Some(last) = messages.last_mut() {
        last.return_value = acc;
    }
    Ok(ExecOutcome {
        rw_set: rw,
        writes,
        messages,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k(c: u32, s: u32) -> StorageKey {
        StorageKey::new(c, s)
    }

    fn set(reads: &[StorageKey], writes: &[StorageKey]) -> ReadWriteSet {
        let mut rw = ReadWriteSet::empty(Granularity::StateLevel);
        reads.iter().for_each(|x| rw.record_read(*x));
        writes.iter().for_each(|x| rw.record_write(*x));
        rw
    }

    pub(crate) fn placement(pairs: &[(u32, u32)]) -> Placement {
        let n = pairs.iter().map(|p| p.1).max().unwrap_or(0) + 1;
        Placement {
            n_shards: n,
            shard_of: pairs.iter().map(|(c, s)| (ContractId(*c), ShardId(*s))).collect(),
        }
    }

    #[test]
    fn extract_state_level() {
        let rw = extract_rw_set(&[Step::Read(k(1, 0)), Step::Write(k(1, 1))], Granularity::StateLevel);
        assert_eq!(rw.reads, [AccessKey::State(k(1, 0))].into());
        assert_eq!(rw.writes, [AccessKey::State(k(1, 1))].into());
    }

    #[test]
    fn extract_contract_level() {
        let rw = extract_rw_set(
            &[Step::Read(k(1, 0)), Step::Write(k(1, 1))],
            Granularity::ContractLevel,
        );
        assert_eq!(rw.reads, [AccessKey::Contract(ContractId(1))].into());
        assert_eq!(rw.writes, [AccessKey::Contract(ContractId(1))].into());
    }

    #[test]
    fn extract_write_only() {
        let rw = extract_rw_set(&[Step::Write(k(2, 5))], Granularity::StateLevel);
        assert!(rw.reads.is_empty());
        assert_eq!(rw.writes, [AccessKey::State(k(2, 5))].into());
    }

    #[test]
    fn raw_is_forbidden_war_is_allowed() {
        let key = k(1, 7);
        let writer = set(&[], &[key]);
        let reader = set(&[key], &[]);
        assert!(conflicts(&writer, &reader, DependencyRule::RwDependency).unwrap());
        assert!(!conflicts(&reader, &writer, DependencyRule::RwDependency).unwrap());
        assert!(conflicts(&reader, &writer, DependencyRule::Disjoint).unwrap());
    }

    #[test]
    fn waw_is_forbidden() {
        let key = k(1, 7);
        assert!(conflicts(&set(&[], &[key]), &set(&[], &[key]), DependencyRule::RwDependency).unwrap());
    }

    #[test]
    fn read_after_read_allowed_only_under_dependency_rule() {
        let key = k(3, 3);
        let a = set(&[key], &[]);
        assert!(!conflicts(&a, &a, DependencyRule::RwDependency).unwrap());
        assert!(conflicts(&a, &a, DependencyRule::Disjoint).unwrap());
    }

    #[test]
    fn disjoint_sets_never_conflict() {
        let a = set(&[k(1, 0)], &[k(1, 1)]);
        let b = set(&[k(2, 0)], &[k(2, 1)]);
        for rule in [DependencyRule::Disjoint, DependencyRule::RwDependency] {
            assert!(!conflicts(&a, &b, rule).unwrap());
        }
    }

    #[test]
    fn granularity_mismatch_is_an_error() {
        let a = set(&[k(1, 0)], &[]);
        let b = a.to_contract_level();
        assert!(matches!(
            conflicts(&a, &b, DependencyRule::Disjoint),
            Err(Error::GranularityMismatch(..))
        ));
    }

    fn txn(trace: Vec<Step>) -> Transaction {
        Transaction {
            id: TxnId(1),
            issue_time_ms: 0.0,
            fee: 1,
            trace,
        }
    }

    fn call(to: u32) -> Step {
        Step::Call {
            to: ContractId(to),
            payload_bytes: 10,
            return_bytes: 4,
        }
    }

    #[test]
    fn related_shards_single_and_cross() {
        let p = placement(&[(1, 1), (2, 3), (3, 2), (4, 3)]);
        let single = txn(vec![Step::Read(k(2, 0)), call(4), Step::Write(k(4, 1))]);
        assert_eq!(related_shards(&single, &p).unwrap(), [ShardId(3)].into());
        let cross = txn(vec![Step::Read(k(1, 0)), call(3), Step::Write(k(3, 1))]);
        assert_eq!(
            related_shards(&cross, &p).unwrap(),
            [ShardId(1), ShardId(2)].into()
        );
    }

    #[test]
    fn unplaced_contract_is_an_error() {
        let p = placement(&[(1, 0)]);
        let t = txn(vec![Step::Read(k(1, 0)), call(9)]);
        assert!(matches!(related_shards(&t, &p), Err(Error::UnplacedContract(ContractId(9)))));
    }

    #[test]
    fn validate_rejects_foreign_storage_access() {
        let t = txn(vec![Step::Read(k(1, 0)), Step::Write(k(2, 0))]);
        assert!(t.validate().is_err());
        assert!(txn(vec![Step::Compute { cost_ms: 1.0 }]).validate().is_err());
        assert!(txn(vec![]).validate().is_err());
        assert!(txn(vec![Step::Read(k(1, 0)), call(2), Step::Write(k(2, 0))]).validate().is_ok());
    }

    #[test]
    fn execution_emits_one_message_per_cross_shard_call() {
        let p = placement(&[(1, 0), (2, 0), (3, 1)]);
        let t = txn(vec![
            Step::Read(k(1, 0)),
            call(2),
            Step::Write(k(2, 0)),
            call(3),
            Step::Read(k(3, 4)),
            call(1),
            Step::Write(k(1, 2)),
        ]);
        let out = execute_trace(&t, &p, Granularity::StateLevel, &mut BTreeMap::new()).unwrap();
        let pairs: Vec<_> = out
            .messages
            .iter()
            .map(|m| (m.seq, m.from_contract.0, m.to_contract.0))
            .collect();
        assert_eq!(pairs, vec![(0, 2, 3), (1, 3, 1)]);
        assert_eq!(out.messages[0].return_value, out.messages[1].params);
        assert_eq!(out.rw_set, extract_rw_set(&t.trace, Granularity::StateLevel));
    }

    #[test]
    fn execution_depends_on_read_values() {
        let p = placement(&[(1, 0), (2, 1)]);
        let t = txn(vec![Step::Read(k(1, 0)), call(2), Step::Write(k(2, 0))]);
        let a = execute_trace(&t, &p, Granularity::StateLevel, &mut BTreeMap::new()).unwrap();
        let mut other = BTreeMap::from([(k(1, 0), 42)]);
        let b = execute_trace(&t, &p, Granularity::StateLevel, &mut other).unwrap();
        assert_ne!(a.messages[0].params, b.messages[0].params);
        assert_ne!(a.writes, b.writes);
        assert_eq!(a.rw_set, b.rw_set);
    }
}
