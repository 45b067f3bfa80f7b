//! Shard execution and asynchronous correction.
//!
//! A shard replays its block against versioned storage using the values
//! carried in profiles instead of talking to other shards, applies the writes
//! of transactions it finds valid, and moves on to the next round without
//! waiting. Proofs from all shards later confirm transactions or invalidate
//! them, and invalidated writes are rolled back together with everything that
//! built on them.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    genesis_value, seed_acc, step_call, step_compute, step_read, step_write, write_value, Block,
    Granularity, InvalidReason, Issuer, OrderEntry, Placement, Proof, ReadWriteSet, Round,
    Sequenced, ShardId, StateView, Step, StorageKey, TxnId, Value, Verdict, VerdictEntry,
};
use crate::sequencer::{order_violations, OrderingRule};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WriteRecord {
    pub round: Round,
    pub txn: TxnId,
    pub value: Value,
}

/// Per-key write history. Records are appended in execution order, which is
/// global-order sequence.
#[derive(Debug, Clone, Default)]
pub struct VersionedStore {
    records: BTreeMap<StorageKey, Vec<WriteRecord>>,
    written_by: HashMap<Sequenced, Vec<StorageKey>>,
}

impl VersionedStore {
    pub fn head(&self, key: StorageKey) -> Option<&WriteRecord> {
        self.records.get(&key).and_then(|v| v.last())
    }

    pub fn read_head(&self, key: StorageKey) -> Value {
        self.head(key).map_or_else(|| genesis_value(key), |r| r.value)
    }

    /// Latest live value written in a round no later than `round`.
    pub fn read_at(&self, key: StorageKey, round: Round) -> Value {
        self.records
            .get(&key)
            .and_then(|v| v.iter().rev().find(|r| r.round <= round))
            .map_or_else(|| genesis_value(key), |r| r.value)
    }

    /// Latest live value among the records accepted by `keep`.
    pub fn read_latest(&self, key: StorageKey, keep: impl Fn(&WriteRecord) -> bool) -> Value {
        self.records
            .get(&key)
            .and_then(|v| v.iter().rev().find(|r| keep(r)))
            .map_or_else(|| genesis_value(key), |r| r.value)
    }

    pub fn newer_than(&self, key: StorageKey, round: Round) -> bool {
        self.head(key).is_some_and(|r| r.round > round)
    }

    pub fn apply(&mut self, round: Round, txn: TxnId, writes: &BTreeMap<StorageKey, Value>) {
        for (k, v) in writes {
            self.records.entry(*k).or_default().push(WriteRecord {
                round,
                txn,
                value: *v,
            });
        }
        if !writes.is_empty() {
            self.written_by
                .entry((round, txn))
                .or_default()
                .extend(writes.keys().copied());
        }
    }

    /// Removes every record written by `seq`. Returns how many were removed.
    pub fn rollback(&mut self, seq: Sequenced) -> usize {
        let Some(keys) = self.written_by.remove(&seq) else {
            return 0;
        };
        let mut removed = 0;
        for k in keys {
            if let Some(v) = self.records.get_mut(&k) {
                let before = v.len();
                v.retain(|r| (r.round, r.txn) != seq);
                removed += before - v.len();
                if v.is_empty() {
                    self.records.remove(&k);
                }
            }
        }
        removed
    }

    /// Latest value per key among records accepted by `keep`.
    pub fn state_where(&self, keep: impl Fn(Sequenced) -> bool) -> BTreeMap<StorageKey, Value> {
        self.records
            .iter()
            .filter_map(|(k, v)| {
                v.iter()
                    .rev()
                    .find(|r| keep((r.round, r.txn)))
                    .map(|r| (*k, r.value))
            })
            .collect()
    }

    pub fn record_count(&self) -> usize {
        self.records.values().map(Vec::len).sum()
    }
}

/// Reads the optimistic head of one store.
pub struct HeadView<'a>(pub &'a VersionedStore);

impl StateView for HeadView<'_> {
    fn read(&mut self, key: StorageKey) -> Value {
        self.0.read_head(key)
    }
}

/// Reads the state of `round` across all shards.
pub struct SnapshotView<'a> {
    pub shards: &'a [ShardState],
    pub placement: &'a Placement,
    pub round: Round,
}

impl StateView for SnapshotView<'_> {
    fn read(&mut self, key: StorageKey) -> Value {
        match self.placement.shard(key.contract) {
            Ok(s) => self.shards[s.0 as usize].store.read_at(key, self.round),
            Err(_) => genesis_value(key),
        }
    }
}

/// Reads every key as its own shard's members see it settled: everything up
/// to the confirmed frontier plus later records already confirmed.
pub struct ConfirmedView<'a> {
    pub shards: &'a [ShardState],
    pub placement: &'a Placement,
}

impl StateView for ConfirmedView<'_> {
    fn read(&mut self, key: StorageKey) -> Value {
        match self.placement.shard(key.contract) {
            Ok(s) => {
                let shard = &self.shards[s.0 as usize];
                let frontier = shard.tracker.frontier();
                shard.store.read_latest(key, |r| {
                    r.round <= frontier
                        || shard.tracker.status((r.round, r.txn)) == Some(Status::Confirmed)
                })
            }
            Err(_) => genesis_value(key),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pending,
    Confirmed,
    Invalidated,
}

/// Why a transaction was invalidated.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Cause {
    /// Issuers that found the transaction invalid, with their reasons.
    Verdict(BTreeMap<Issuer, InvalidReason>),
    /// An earlier transaction it built on was invalidated.
    Cascade(Sequenced),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StatusChange {
    pub seq: Sequenced,
    pub status: Status,
    pub cause: Option<Cause>,
}

#[derive(Debug, Clone)]
struct Tracked {
    required: BTreeSet<Issuer>,
    received: BTreeMap<Issuer, VerdictEntry>,
    status: Status,
}

#[derive(Debug, Clone, Default)]
struct RoundProgress {
    unresolved: usize,
}

/// Rule-1 bookkeeping over every sequenced transaction, fed by proofs.
#[derive(Debug, Clone, Default)]
pub struct ConfirmationTracker {
    sequencer: Option<Issuer>,
    entries: HashMap<Sequenced, Tracked>,
    dependents: HashMap<Sequenced, Vec<Sequenced>>,
    rounds: BTreeMap<Round, RoundProgress>,
    parked: BTreeMap<Round, Vec<Proof>>,
    frontier: Round,
}

impl ConfirmationTracker {
    /// `sequencer`, when set, must also vouch for every transaction.
    pub fn new(sequencer: Option<Issuer>) -> Self {
        Self {
            sequencer,
            ..Self::default()
        }
    }

    /// Highest round up to which every transaction is resolved.
    pub fn frontier(&self) -> Round {
        self.frontier
    }

    pub fn status(&self, seq: Sequenced) -> Option<Status> {
        self.entries.get(&seq).map(|e| e.status)
    }

    pub fn is_registered(&self, round: Round) -> bool {
        self.rounds.contains_key(&round)
    }

    /// Announces a round's order: each transaction with the shards it touches.
    /// Proofs for the round that arrived early are processed now.
    pub fn register_round(
        &mut self,
        round: Round,
        related: &BTreeMap<TxnId, BTreeSet<ShardId>>,
    ) -> Result<Vec<StatusChange>> {
        if self.rounds.contains_key(&round) {
            return Ok(Vec::new());
        }
        for (txn, shards) in related {
            let mut required: BTreeSet<Issuer> = shards.iter().map(|s| Issuer::Shard(*s)).collect();
            required.extend(self.sequencer);
            self.entries.insert(
                (round, *txn),
                Tracked {
                    required,
                    received: BTreeMap::new(),
                    status: Status::Pending,
                },
            );
        }
        self.rounds.insert(
            round,
            RoundProgress {
                unresolved: related.len(),
            },
        );
        let mut changes = Vec::new();
        for proof in self.parked.remove(&round).unwrap_or_default() {
            changes.extend(self.accept(proof)?);
        }
        self.advance_frontier();
        Ok(changes)
    }

    /// Processes one incoming proof.
    pub fn receive(&mut self, proof: Proof) -> Result<Vec<StatusChange>> {
        let digest = Proof::digest(proof.issuer, proof.round, &proof.verdicts);
        if proof.attestation.issuer != proof.issuer || proof.attestation.payload_digest != digest {
            return Err(Error::ProofRejected(format!(
                "attestation does not match proof from {:?} for round {}",
                proof.issuer, proof.round
            )));
        }
        if !self.rounds.contains_key(&proof.round) {
            self.parked.entry(proof.round).or_default().push(proof);
            return Ok(Vec::new());
        }
        let changes = self.accept(proof)?;
        self.advance_frontier();
        Ok(changes)
    }

    fn accept(&mut self, proof: Proof) -> Result<Vec<StatusChange>> {
        let mut changes = Vec::new();
        let round = proof.round;
        for (txn, entry) in proof.verdicts {
            let seq = (round, txn);
            let tracked = self.entries.get_mut(&seq).ok_or(Error::UnknownTxn(txn))?;
            if !tracked.required.contains(&proof.issuer) {
                return Err(Error::ProofRejected(format!(
                    "{:?} is not related to {txn} in round {round}",
                    proof.issuer
                )));
            }
            tracked.received.insert(proof.issuer, entry);
            self.evaluate(seq, &mut changes)?;
        }
        Ok(changes)
    }

    fn evaluate(&mut self, start: Sequenced, changes: &mut Vec<StatusChange>) -> Result<()> {
        let mut work = vec![start];
        while let Some(seq) = work.pop() {
            let tracked = &self.entries[&seq];
            if tracked.status != Status::Pending {
                continue;
            }
            let invalid: BTreeMap<Issuer, InvalidReason> = tracked
                .received
                .iter()
                .filter_map(|(i, e)| match e.verdict {
                    Verdict::Invalid(r) => Some((*i, r)),
                    Verdict::Valid => None,
                })
                .collect();
            let preds: Vec<Sequenced> = tracked
                .received
                .values()
                .flat_map(|e| e.predecessors.iter().copied())
                .collect();
            let complete = tracked.required.len() == tracked.received.len();
            let mut outcome = None;
            if !invalid.is_empty() {
                outcome = Some((Status::Invalidated, Some(Cause::Verdict(invalid))));
            } else {
                let mut waiting = Vec::new();
                for p in &preds {
                    match self.entries.get(p).map(|e| e.status) {
                        Some(Status::Invalidated) => {
                            outcome = Some((Status::Invalidated, Some(Cause::Cascade(*p))));
                            break;
                        }
                        Some(Status::Confirmed) => {}
                        Some(Status::Pending) => waiting.push(*p),
                        None => {
                            return Err(Error::Invariant(format!(
                                "predecessor {p:?} of {seq:?} was never sequenced"
                            )))
                        }
                    }
                }
                if outcome.is_none() {
                    if complete && waiting.is_empty() {
                        outcome = Some((Status::Confirmed, None));
                    } else {
                        for p in waiting {
                            let deps = self.dependents.entry(p).or_default();
                            if !deps.contains(&seq) {
                                deps.push(seq);
                            }
                        }
                    }
                }
            }
            if let Some((status, cause)) = outcome {
                self.entries.get_mut(&seq).expect("tracked").status = status;
                if let Some(r) = self.rounds.get_mut(&seq.0) {
                    r.unresolved -= 1;
                }
                changes.push(StatusChange { seq, status, cause });
                if let Some(deps) = self.dependents.remove(&seq) {
                    work.extend(deps.into_iter().rev());
                }
            }
        }
        Ok(())
    }

    fn advance_frontier(&mut self) {
        while let Some(r) = self.rounds.get(&(self.frontier + 1)) {
            if r.unresolved > 0 {
                break;
            }
            self.frontier += 1;
        }
    }

    pub fn pending(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.status == Status::Pending)
            .count()
    }
}

/// One shard's replica state.
#[derive(Debug, Clone)]
pub struct ShardState {
    pub shard: ShardId,
    pub store: VersionedStore,
    pub tracker: ConfirmationTracker,
    pub last_executed: Round,
}

impl ShardState {
    pub fn new(shard: ShardId, sequencer: Option<Issuer>) -> Self {
        Self {
            shard,
            store: VersionedStore::default(),
            tracker: ConfirmationTracker::new(sequencer),
            last_executed: 0,
        }
    }

    /// Feeds a proof to the tracker and rolls back whatever it invalidates.
    pub fn exchange_and_correct(&mut self, incoming: Vec<Proof>) -> Result<Vec<StatusChange>> {
        let mut changes = Vec::new();
        for p in incoming {
            changes.extend(self.tracker.receive(p)?);
        }
        self.roll_back(&changes);
        Ok(changes)
    }

    pub fn register_round(
        &mut self,
        round: Round,
        related: &BTreeMap<TxnId, BTreeSet<ShardId>>,
    ) -> Result<Vec<StatusChange>> {
        let changes = self.tracker.register_round(round, related)?;
        self.roll_back(&changes);
        Ok(changes)
    }

    fn roll_back(&mut self, changes: &[StatusChange]) {
        for c in changes {
            if c.status == Status::Invalidated {
                self.store.rollback(c.seq);
            }
        }
    }

    /// The shard's view of confirmed state.
    pub fn confirmed_state(&self) -> BTreeMap<StorageKey, Value> {
        self.store
            .state_where(|seq| self.tracker.status(seq) == Some(Status::Confirmed))
    }

    /// Whether the shard can start the next round right away instead of
    /// waiting for proofs of the rounds it already executed.
    pub fn optimistic_advance(&self, next: Round) -> bool {
        next == self.last_executed + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecutedBlock {
    pub round: Round,
    pub verdicts: BTreeMap<TxnId, VerdictEntry>,
    /// Simulated time spent replaying the block.
    pub compute_ms: f64,
}

/// Deterministically replays `block` on `state`.
pub fn execute_block(
    state: &mut ShardState,
    block: &Block,
    placement: &Placement,
    rule: OrderingRule,
) -> Result<ExecutedBlock> {
    let expected = state.last_executed + 1;
    if block.round != expected {
        return Err(Error::WrongRound {
            expected,
            got: block.round,
        });
    }
    let shard = state.shard;
    let on_shard = |c| placement.shard(c).map(|s| s == shard).unwrap_or(false);
    let violators = order_violations(&block.txns, rule, on_shard)?;
    let mut verdicts = BTreeMap::new();
    let mut compute_ms = 0.0;
    for entry in &block.txns {
        let seq = (block.round, entry.txn.id);
        let replay = replay_on_shard(entry, shard, placement, &state.store)?;
        compute_ms += replay.compute_ms;
        let predecessors: Vec<Sequenced> = replay
            .touched
            .iter()
            .filter_map(|k| state.store.head(*k).map(|r| (r.round, r.txn)))
            .filter(|p| *p != seq && state.tracker.status(*p) != Some(Status::Confirmed))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let verdict = if violators.contains(&entry.txn.id) {
            Verdict::Invalid(InvalidReason::OrderViolation)
        } else {
            replay.verdict
        };
        if verdict.is_valid() {
            state.store.apply(block.round, entry.txn.id, &replay.writes);
        }
        verdicts.insert(
            entry.txn.id,
            VerdictEntry {
                verdict,
                predecessors,
            },
        );
    }
    state.last_executed = block.round;
    Ok(ExecutedBlock {
        round: block.round,
        verdicts,
        compute_ms,
    })
}

struct Replay {
    verdict: Verdict,
    writes: BTreeMap<StorageKey, Value>,
    touched: BTreeSet<StorageKey>,
    compute_ms: f64,
}

/// Runs the segments of a trace that live on `shard`, entering each from the
/// parameters recorded in the profile, and compares everything observable on
/// this shard with the profile.
fn replay_on_shard(
    entry: &OrderEntry,
    shard: ShardId,
    placement: &Placement,
    store: &VersionedStore,
) -> Result<Replay> {
    let txn = &entry.txn;
    let profile = &entry.profile;
    let msgs = &profile.messages;
    let granularity: Granularity = profile.rw_set.granularity;
    let mut ctx = txn.entry_contract().ok_or_else(|| Error::InvalidTransaction {
        txn: txn.id,
        reason: "empty trace".into(),
    })?;
    let mut active = placement.shard(ctx)? == shard;
    let mut acc = seed_acc(txn.id);
    let mut observed = ReadWriteSet::empty(granularity);
    let mut writes: BTreeMap<StorageKey, Value> = BTreeMap::new();
    let mut reads: BTreeSet<StorageKey> = BTreeSet::new();
    let mut structural_ok = true;
    let mut values_ok = true;
    let mut compute_ms = 0.0;
    let mut next_msg = 0usize;

    for (i, step) in txn.trace.iter().enumerate() {
        match step {
            Step::Compute { cost_ms } => {
                if active {
                    acc = step_compute(acc, i);
                    compute_ms += cost_ms;
                }
            }
            Step::Read(k) => {
                if active {
                    let v = writes.get(k).copied().unwrap_or_else(|| store.read_head(*k));
                    observed.record_read(*k);
                    reads.insert(*k);
                    acc = step_read(acc, *k, v);
                }
            }
            Step::Write(k) => {
                if active {
                    let v = write_value(acc, i, txn.id);
                    writes.insert(*k, v);
                    observed.record_write(*k);
                    acc = step_write(acc, v);
                }
            }
            Step::Call {
                to,
                payload_bytes,
                return_bytes,
            } => {
                let to_shard = placement.shard(*to)?;
                if placement.shard(ctx)? == to_shard {
                    if active {
                        acc = step_call(acc, *to);
                    }
                } else {
                    let Some(m) = msgs.get(next_msg) else {
                        structural_ok = false;
                        break;
                    };
                    if m.from_contract != ctx
                        || m.to_contract != *to
                        || m.payload_bytes != *payload_bytes
                        || m.return_bytes != *return_bytes
                    {
                        structural_ok = false;
                        break;
                    }
                    if active {
                        values_ok &= m.params == acc;
                        if next_msg > 0 {
                            values_ok &= msgs[next_msg - 1].return_value == acc;
                        }
                    }
                    active = to_shard == shard;
                    if active {
                        acc = step_call(m.params, *to);
                    }
                    next_msg += 1;
                }
                ctx = *to;
            }
        }
    }
    if structural_ok && next_msg != msgs.len() {
        structural_ok = false;
    }
    if structural_ok && active && next_msg > 0 {
        values_ok &= msgs[next_msg - 1].return_value == acc;
    }
    let expected = profile
        .rw_set
        .restricted(|c| placement.shard(c).map(|s| s == shard).unwrap_or(false));
    let verdict = if !structural_ok || observed != expected {
        Verdict::Invalid(InvalidReason::Mismatch)
    } else if !values_ok {
        if reads.iter().any(|k| store.newer_than(*k, profile.base_round)) {
            Verdict::Invalid(InvalidReason::Stale)
        } else {
            Verdict::Invalid(InvalidReason::Mismatch)
        }
    } else {
        Verdict::Valid
    };
    let touched = reads.into_iter().chain(writes.keys().copied()).collect();
    Ok(Replay {
        verdict,
        writes,
        touched,
        compute_ms,
    })
}

/// One line of the confirmed-history export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub round: Round,
    pub position: u32,
    pub txn_id: TxnId,
    pub status: Status,
    pub confirm_time_ms: Option<f64>,
}

/// Confirmed transactions in global-order sequence.
pub fn confirmed_sequence(history: &[HistoryRecord]) -> Vec<TxnId> {
    let mut confirmed: Vec<&HistoryRecord> = history
        .iter()
        .filter(|h| h.status == Status::Confirmed)
        .collect();
    confirmed.sort_by_key(|h| (h.round, h.position));
    confirmed.iter().map(|h| h.txn_id).collect()
}
