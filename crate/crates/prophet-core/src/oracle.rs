//! Trusted monolithic executor used as ground truth. It holds the whole world
//! state, runs transactions serially in a given order, and never takes part in
//! any protocol path.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{
    execute_trace, CoalitionId, Granularity, Placement, StorageKey, Transaction,
    TransactionProfile, TxnId, Value,
};

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MonolithicState {
    /// Keys that have been written; everything else holds its genesis value.
    pub values: BTreeMap<StorageKey, Value>,
    pub history: Vec<TxnId>,
}

impl MonolithicState {
    pub fn genesis() -> Self {
        Self::default()
    }
}

/// Coalition id stamped on profiles produced by the oracle.
pub const ORACLE_COALITION: CoalitionId = CoalitionId(u32::MAX);

/// Runs `order` serially on top of `initial`, returning the final state and
/// the profile each transaction has at its serial position.
pub fn ideal_execute(
    initial: &MonolithicState,
    txns: &[Transaction],
    order: &[TxnId],
    placement: &Placement,
    granularity: Granularity,
) -> Result<(MonolithicState, Vec<TransactionProfile>)> {
    let by_id: BTreeMap<TxnId, &Transaction> = txns.iter().map(|t| (t.id, t)).collect();
    let mut state = initial.clone();
    let mut profiles = Vec::with_capacity(order.len());
    for id in order {
        let txn = by_id.get(id).ok_or(Error::UnknownTxn(*id))?;
        let out = execute_trace(txn, placement, granularity, &mut state.values)?;
        state.values.extend(out.writes);
        state.history.push(*id);
        profiles.push(TransactionProfile {
            txn_id: *id,
            rw_set: out.rw_set,
            messages: out.messages,
            base_round: 0,
            coalition: ORACLE_COALITION,
        });
    }
    Ok((state, profiles))
}

/// True iff replaying `history` serially from `genesis` yields exactly
/// `observed` (the union of the system's confirmed writes).
pub fn check_serializable(
    history: &[TxnId],
    txns: &BTreeMap<TxnId, Transaction>,
    placement: &Placement,
    genesis: &MonolithicState,
    observed: &BTreeMap<StorageKey, Value>,
) -> Result<bool> {
    let mut state = genesis.values.clone();
    for id in history {
        let txn = txns.get(id).ok_or(Error::UnknownTxn(*id))?;
        let out = execute_trace(txn, placement, Granularity::StateLevel, &mut state)?;
        state.extend(out.writes);
    }
    Ok(&state == observed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ContractId, ShardId, Step};

    fn placement() -> Placement {
        Placement {
            n_shards: 1,
            shard_of: [(ContractId(0), ShardId(0))].into(),
        }
    }

    fn t(id: u64, trace: Vec<Step>) -> Transaction {
        Transaction {
            id: TxnId(id),
            issue_time_ms: 0.0,
            fee: 1,
            trace,
        }
    }

    #[test]
    fn empty_prefix_is_genesis() {
        let (s, p) = ideal_execute(&MonolithicState::genesis(), &[], &[], &placement(), Granularity::StateLevel)
            .unwrap();
        assert_eq!(s, MonolithicState::genesis());
        assert!(p.is_empty());
    }

    #[test]
    fn empty_history_is_serializable() {
        let ok = check_serializable(&[], &BTreeMap::new(), &placement(), &MonolithicState::genesis(), &BTreeMap::new());
        assert!(ok.unwrap());
    }

    #[test]
    fn raw_overwrite_is_detected() {
        let k0 = StorageKey::new(0, 0);
        let k1 = StorageKey::new(0, 1);
        let a = t(1, vec![Step::Write(k0)]);
        let b = t(2, vec![Step::Read(k0), Step::Write(k1)]);
        let txns: BTreeMap<_, _> = [(a.id, a.clone()), (b.id, b.clone())].into();
        let p = placement();
        // The system ran b before a but reports the order a, b.
        let (bad, _) = ideal_execute(&MonolithicState::genesis(), &[a.clone(), b.clone()], &[b.id, a.id], &p, Granularity::StateLevel).unwrap();
        let g = MonolithicState::genesis();
        assert!(!check_serializable(&[a.id, b.id], &txns, &p, &g, &bad.values).unwrap());
        assert!(check_serializable(&[b.id, a.id], &txns, &p, &g, &bad.values).unwrap());
    }

    #[test]
    fn unknown_txn_is_an_error() {
        let r = check_serializable(&[TxnId(9)], &BTreeMap::new(), &placement(), &MonolithicState::genesis(), &BTreeMap::new());
        assert!(matches!(r, Err(Error::UnknownTxn(TxnId(9)))));
    }

    #[test]
    fn order_determinism() {
        let k0 = StorageKey::new(0, 0);
        let txns: Vec<_> = (0..5).map(|i| t(i, vec![Step::Read(k0), Step::Write(k0)])).collect();
        let order: Vec<_> = (0..5).rev().map(TxnId).collect();
        let a = ideal_execute(&MonolithicState::genesis(), &txns, &order, &placement(), Granularity::StateLevel).unwrap();
        let b = ideal_execute(&MonolithicState::genesis(), &txns, &order, &placement(), Granularity::StateLevel).unwrap();
        assert_eq!(a, b);
    }
}
