//! The stateless sequence shard: admits pre-executed transactions into a
//! conflict-free global order and projects that order onto shard blocks.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    conflicts, AccessKey, Attestation, Block, ContractId, DependencyRule, GlobalOrder,
    Granularity, OrderEntry, Placement, ReadWriteSet, Round, ShardId, Transaction,
    TransactionProfile, TxnId,
};

/// Rounds a transaction may be rejected before it is admitted ahead of
/// everything else.
pub const MAX_DEFERRALS: u32 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct OrderingRule {
    pub granularity: Granularity,
    pub dependency: DependencyRule,
    pub reorder: bool,
}

impl OrderingRule {
    pub const CONTRACT: Self = Self {
        granularity: Granularity::ContractLevel,
        dependency: DependencyRule::Disjoint,
        reorder: false,
    };
    pub const STATE: Self = Self {
        granularity: Granularity::StateLevel,
        dependency: DependencyRule::Disjoint,
        reorder: false,
    };
    pub const RWDEP: Self = Self {
        granularity: Granularity::StateLevel,
        dependency: DependencyRule::RwDependency,
        reorder: false,
    };
    pub const RWDEP_REORDER: Self = Self {
        reorder: true,
        ..Self::RWDEP
    };
}

impl Default for OrderingRule {
    fn default() -> Self {
        Self::RWDEP
    }
}

impl fmt::Display for OrderingRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let base = match (self.granularity, self.dependency) {
            (Granularity::ContractLevel, DependencyRule::Disjoint) => "contract",
            (Granularity::StateLevel, DependencyRule::Disjoint) => "state",
            (Granularity::StateLevel, DependencyRule::RwDependency) => "rwdep",
            (Granularity::ContractLevel, DependencyRule::RwDependency) => "contract-rwdep",
        };
        f.write_str(base)?;
        if self.reorder {
            f.write_str(",reorder")?;
        }
        Ok(())
    }
}

impl FromStr for OrderingRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(',').map(str::trim);
        let mut rule = match parts.next() {
            Some("contract") => Self::CONTRACT,
            Some("state") => Self::STATE,
            Some("rwdep") => Self::RWDEP,
            Some("contract-rwdep") => Self {
                granularity: Granularity::ContractLevel,
                ..Self::RWDEP
            },
            _ => {
                return Err(Error::Config(format!(
                    "ordering must be contract|state|rwdep[,reorder], got {s:?}"
                )))
            }
        };
        match (parts.next(), parts.next()) {
            (None, _) => {}
            (Some("reorder"), None) if rule.dependency == DependencyRule::RwDependency => {
                rule.reorder = true
            }
            (Some("reorder"), None) => {
                return Err(Error::Config(format!(
                    "reorder only applies to the rwdep rule, got {s:?}"
                )))
            }
            _ => return Err(Error::Config(format!("unrecognized ordering {s:?}"))),
        }
        Ok(rule)
    }
}

impl Serialize for OrderingRule {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for OrderingRule {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone)]
pub struct Candidate {
    pub txn: Arc<Transaction>,
    pub profile: Arc<TransactionProfile>,
    /// Rounds this transaction has already been rejected.
    pub deferrals: u32,
}

/// Keys held by the transactions admitted so far.
#[derive(Default)]
struct Admitted {
    reads: HashSet<AccessKey>,
    writes: HashSet<AccessKey>,
}

impl Admitted {
    /// Same answer as checking `conflicts(e, rw, dep)` against every admitted `e`.
    fn accepts(&self, rw: &ReadWriteSet, dep: DependencyRule) -> bool {
        let clash = |k: &AccessKey| match dep {
            DependencyRule::Disjoint => self.writes.contains(k) || self.reads.contains(k),
            DependencyRule::RwDependency => self.writes.contains(k),
        };
        !rw.all_keys().any(clash)
    }

    fn add(&mut self, rw: &ReadWriteSet) {
        self.reads.extend(rw.reads.iter().copied());
        self.writes.extend(rw.writes.iter().copied());
    }
}

fn scan(sets: &[&ReadWriteSet], dep: DependencyRule) -> Vec<bool> {
    let mut admitted = Admitted::default();
    sets.iter()
        .map(|rw| {
            let ok = admitted.accepts(rw, dep);
            if ok {
                admitted.add(rw);
            }
            ok
        })
        .collect()
}

fn projected(candidates: &[Candidate], rule: OrderingRule) -> Result<Vec<ReadWriteSet>> {
    candidates
        .iter()
        .map(|c| c.profile.rw_set.at_granularity(rule.granularity))
        .collect()
}

/// Moves transactions held back only by a read-after-write dependency in
/// front of the writer, keeping a move only if more transactions get in.
pub fn reorder(candidates: Vec<Candidate>, rule: OrderingRule) -> Result<Vec<Candidate>> {
    let sets = projected(&candidates, rule)?;
    let mut perm: Vec<usize> = (0..candidates.len()).collect();
    let admitted_count = |perm: &[usize]| {
        let view: Vec<&ReadWriteSet> = perm.iter().map(|i| &sets[*i]).collect();
        let ok = scan(&view, rule.dependency);
        (ok.iter().filter(|a| **a).count(), ok)
    };
    let (mut best, mut ok) = admitted_count(&perm);
    let mut pos = 0;
    while pos < perm.len() {
        if ok[pos] {
            pos += 1;
            continue;
        }
        let later = &sets[perm[pos]];
        let raw_only_blocker = (0..pos).find(|&e| {
            let earlier = &sets[perm[e]];
            ok[e]
                && candidates[perm[e]].deferrals < MAX_DEFERRALS
                && earlier.writes.iter().any(|k| later.reads.contains(k))
                && !earlier.writes.iter().any(|k| later.writes.contains(k))
                && !later.writes.iter().any(|k| earlier.reads.contains(k))
        });
        if let Some(e) = raw_only_blocker {
            let mut trial = perm.clone();
            let moved = trial.remove(pos);
            trial.insert(e, moved);
            let (count, trial_ok) = admitted_count(&trial);
            if count > best {
                best = count;
                perm = trial;
                ok = trial_ok;
                continue;
            }
        }
        pos += 1;
    }
    let mut slots: Vec<Option<Candidate>> = candidates.into_iter().map(Some).collect();
    Ok(perm.into_iter().filter_map(|i| slots[i].take()).collect())
}

/// Greedy admission in arrival order. Candidates deferred too often go first.
/// Returns the order and the rejected transactions, in candidate order.
pub fn build_order(
    candidates: Vec<Candidate>,
    rule: OrderingRule,
    round: Round,
) -> Result<(GlobalOrder, Vec<Candidate>)> {
    let (mut arranged, rest): (Vec<_>, Vec<_>) = candidates
        .into_iter()
        .partition(|c| c.deferrals >= MAX_DEFERRALS);
    arranged.extend(rest);
    if rule.reorder && rule.dependency == DependencyRule::RwDependency {
        arranged = reorder(arranged, rule)?;
    }
    let sets = projected(&arranged, rule)?;
    let admitted = scan(&sets.iter().collect::<Vec<_>>(), rule.dependency);
    let mut entries = Vec::new();
    let mut rejected = Vec::new();
    for (c, ok) in arranged.into_iter().zip(admitted) {
        if ok {
            entries.push(OrderEntry {
                position: entries.len() as u32,
                txn: c.txn,
                profile: c.profile,
            });
        } else {
            rejected.push(c);
        }
    }
    Ok((GlobalOrder { round, entries }, rejected))
}

/// Appends a transaction regardless of the admission rule, as a faulty
/// leader would.
pub fn admit_anyway(order: &mut GlobalOrder, candidate: Candidate) {
    order.entries.push(OrderEntry {
        position: order.entries.len() as u32,
        txn: candidate.txn,
        profile: candidate.profile,
    });
}

/// Entries with a forbidden dependency on an earlier well-ordered entry,
/// looking only at keys of contracts accepted by `keep`.
pub fn order_violations(
    entries: &[OrderEntry],
    rule: OrderingRule,
    keep: impl Fn(ContractId) -> bool,
) -> Result<BTreeSet<TxnId>> {
    let mut admitted = Admitted::default();
    let mut bad = BTreeSet::new();
    for e in entries {
        let rw = e.profile.rw_set.at_granularity(rule.granularity)?.restricted(&keep);
        if admitted.accepts(&rw, rule.dependency) {
            admitted.add(&rw);
        } else {
            bad.insert(e.txn.id);
        }
    }
    Ok(bad)
}

/// Exhaustive pairwise check of an order against the admission rule.
pub fn is_admissible(order: &GlobalOrder, rule: OrderingRule) -> Result<bool> {
    let sets: Vec<ReadWriteSet> = order
        .entries
        .iter()
        .map(|e| e.profile.rw_set.at_granularity(rule.granularity))
        .collect::<Result<_>>()?;
    for (i, later) in sets.iter().enumerate() {
        for earlier in &sets[..i] {
            if conflicts(earlier, later, rule.dependency)? {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Projects an order onto every shard. Shards the order does not touch get
/// an empty block so that every shard sees every round.
pub fn split_per_shard(
    order: &GlobalOrder,
    placement: &Placement,
    attestation: Attestation,
) -> Result<BTreeMap<ShardId, Block>> {
    let mut blocks: BTreeMap<ShardId, Block> = placement
        .shards()
        .map(|s| {
            (
                s,
                Block {
                    shard: s,
                    round: order.round,
                    txns: Vec::new(),
                    attestation,
                },
            )
        })
        .collect();
    for entry in &order.entries {
        for s in crate::model::related_shards(&entry.txn, placement)? {
            blocks
                .get_mut(&s)
                .ok_or_else(|| Error::Invariant(format!("{s} outside placement")))?
                .txns
                .push(entry.clone());
        }
    }
    Ok(blocks)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DispatchMode {
    /// Blocks leave with the leader's proposal; the sequence shard's own
    /// consensus result arrives later as a proof.
    Pipelined,
    /// Blocks leave once the sequence shard has agreed on the order.
    Serial,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DispatchPlan {
    pub blocks_sent_at: f64,
    /// When the sequence shard's verdict proof is sent, if it sends one.
    pub proof_sent_at: Option<f64>,
}

pub fn propose(
    order: &GlobalOrder,
    mode: DispatchMode,
    now: f64,
    consensus_ms: f64,
) -> Option<DispatchPlan> {
    if order.entries.is_empty() {
        return None;
    }
    Some(match mode {
        DispatchMode::Pipelined => DispatchPlan {
            blocks_sent_at: now,
            proof_sent_at: Some(now + consensus_ms),
        },
        DispatchMode::Serial => DispatchPlan {
            blocks_sent_at: now + consensus_ms,
            proof_sent_at: None,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CoalitionId, Issuer, Step, StorageKey};

    fn cand(id: u64, reads: &[(u32, u32)], writes: &[(u32, u32)]) -> Candidate {
        let mut trace: Vec<Step> = reads.iter().map(|(c, s)| Step::Read(StorageKey::new(*c, *s))).collect();
        trace.extend(writes.iter().map(|(c, s)| Step::Write(StorageKey::new(*c, *s))));
        let mut rw = ReadWriteSet::empty(Granularity::StateLevel);
        reads.iter().for_each(|(c, s)| rw.record_read(StorageKey::new(*c, *s)));
        writes.iter().for_each(|(c, s)| rw.record_write(StorageKey::new(*c, *s)));
        Candidate {
            txn: Arc::new(Transaction { id: TxnId(id), issue_time_ms: 0.0, fee: 0, trace }),
            profile: Arc::new(TransactionProfile {
                txn_id: TxnId(id),
                rw_set: rw,
                messages: vec![],
                base_round: 0,
                coalition: CoalitionId(0),
            }),
            deferrals: 0,
        }
    }

    fn ids(order: &GlobalOrder) -> Vec<u64> {
        order.txn_ids().iter().map(|t| t.0).collect()
    }

    #[test]
    fn parse_rules() {
        assert_eq!("contract".parse::<OrderingRule>().unwrap(), OrderingRule::CONTRACT);
        assert_eq!("rwdep,reorder".parse::<OrderingRule>().unwrap(), OrderingRule::RWDEP_REORDER);
        assert!("state,reorder".parse::<OrderingRule>().is_err());
        assert!("fast".parse::<OrderingRule>().is_err());
        for r in [OrderingRule::CONTRACT, OrderingRule::STATE, OrderingRule::RWDEP, OrderingRule::RWDEP_REORDER] {
            assert_eq!(r.to_string().parse::<OrderingRule>().unwrap(), r);
        }
    }

    #[test]
    fn disjoint_sets_admitted_under_any_rule() {
        for rule in [OrderingRule::CONTRACT, OrderingRule::STATE, OrderingRule::RWDEP] {
            let (o, rej) = build_order(vec![cand(1, &[(0, 0)], &[(0, 0)]), cand(2, &[(1, 0)], &[])], rule, 1).unwrap();
            assert_eq!(ids(&o), vec![1, 2]);
            assert!(rej.is_empty());
        }
    }

    #[test]
    fn raw_rejected_war_depends_on_rule() {
        for rule in [OrderingRule::STATE, OrderingRule::RWDEP] {
            let (_, rej) = build_order(vec![cand(1, &[], &[(0, 0)]), cand(2, &[(0, 0)], &[])], rule, 1).unwrap();
            assert_eq!(rej.len(), 1);
        }
        let war = || vec![cand(1, &[(0, 0)], &[]), cand(2, &[], &[(0, 0)])];
        assert_eq!(build_order(war(), OrderingRule::STATE, 1).unwrap().1.len(), 1);
        assert!(build_order(war(), OrderingRule::RWDEP, 1).unwrap().1.is_empty());
    }

    #[test]
    fn contract_level_coarsens() {
        let c = || vec![cand(1, &[(0, 0)], &[(0, 0)]), cand(2, &[(0, 1)], &[(0, 1)])];
        assert!(build_order(c(), OrderingRule::STATE, 1).unwrap().1.is_empty());
        assert_eq!(build_order(c(), OrderingRule::CONTRACT, 1).unwrap().1.len(), 1);
    }

    #[test]
    fn granularity_mismatch_is_an_error() {
        let mut c = cand(1, &[(0, 0)], &[]);
        let mut p = (*c.profile).clone();
        p.rw_set = p.rw_set.to_contract_level();
        c.profile = Arc::new(p);
        assert!(matches!(build_order(vec![c], OrderingRule::STATE, 1), Err(Error::GranularityMismatch(..))));
    }

    #[test]
    fn reorder_swaps_raw_pair() {
        let batch = vec![cand(1, &[], &[(0, 0)]), cand(2, &[(0, 0)], &[])];
        let out = reorder(batch.clone(), OrderingRule::RWDEP_REORDER).unwrap();
        assert_eq!(out.iter().map(|c| c.txn.id.0).collect::<Vec<_>>(), vec![2, 1]);
        let (o, rej) = build_order(batch, OrderingRule::RWDEP_REORDER, 1).unwrap();
        assert_eq!(ids(&o), vec![2, 1]);
        assert!(rej.is_empty());
    }

    #[test]
    fn reorder_identity_on_conflict_free_batch() {
        let batch = vec![cand(1, &[(0, 0)], &[]), cand(2, &[(1, 1)], &[(1, 2)]), cand(3, &[(0, 0)], &[])];
        let out = reorder(batch, OrderingRule::RWDEP_REORDER).unwrap();
        assert_eq!(out.iter().map(|c| c.txn.id.0).collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn long_deferred_goes_first() {
        let mut late = cand(2, &[(0, 0)], &[(0, 0)]);
        late.deferrals = MAX_DEFERRALS;
        let (o, rej) = build_order(vec![cand(1, &[(0, 0)], &[(0, 0)]), late], OrderingRule::RWDEP, 1).unwrap();
        assert_eq!(ids(&o), vec![2]);
        assert_eq!(rej[0].txn.id, TxnId(1));
    }

    fn placement3() -> Placement {
        Placement {
            n_shards: 2,
            shard_of: [(ContractId(1), ShardId(0)), (ContractId(2), ShardId(1))].into(),
        }
    }

    fn att() -> Attestation {
        Attestation { issuer: Issuer::Sequencer(ShardId(0)), honest: true, payload_digest: 0 }
    }

    #[test]
    fn split_example() {
        let t1 = cand(1, &[(1, 0)], &[]);
        let c2 = cand(2, &[(1, 1), (2, 1)], &[]);
        let t4 = cand(4, &[(2, 0)], &[]);
        let (o, _) = build_order(vec![t1, c2, t4], OrderingRule::RWDEP, 3).unwrap();
        let blocks = split_per_shard(&o, &placement3(), att()).unwrap();
        let b = |s| blocks[&ShardId(s)].txns.iter().map(|e| e.txn.id.0).collect::<Vec<_>>();
        assert_eq!(b(0), vec![1, 2]);
        assert_eq!(b(1), vec![2, 4]);
    }

    #[test]
    fn empty_order_is_not_dispatched() {
        let o = GlobalOrder { round: 1, entries: vec![] };
        assert!(propose(&o, DispatchMode::Pipelined, 0.0, 500.0).is_none());
        let (o, _) = build_order(vec![cand(1, &[(1, 0)], &[])], OrderingRule::RWDEP, 1).unwrap();
        let p = propose(&o, DispatchMode::Pipelined, 10.0, 500.0).unwrap();
        let s = propose(&o, DispatchMode::Serial, 10.0, 500.0).unwrap();
        assert_eq!(s.blocks_sent_at - p.blocks_sent_at, 500.0);
    }

    #[test]
    fn violations_detected() {
        let (mut o, mut rej) = build_order(vec![cand(1, &[], &[(1, 0)]), cand(2, &[(1, 0)], &[])], OrderingRule::RWDEP, 1).unwrap();
        assert!(order_violations(&o.entries, OrderingRule::RWDEP, |_| true).unwrap().is_empty());
        admit_anyway(&mut o, rej.remove(0));
        assert!(!is_admissible(&o, OrderingRule::RWDEP).unwrap());
        let bad = order_violations(&o.entries, OrderingRule::RWDEP, |c| c == ContractId(1)).unwrap();
        assert_eq!(bad, [TxnId(2)].into());
        assert!(order_violations(&o.entries, OrderingRule::RWDEP, |c| c == ContractId(2)).unwrap().is_empty());
    }
}
