//! Property tests over generated workloads, ordering and pre-execution timing.

use std::collections::BTreeMap;

use proptest::prelude::*;

use prophet_core::config::{ExperimentConfig, Mechanism};
use prophet_core::engine::{cross_shard_bytes, run_experiment};
use prophet_core::model::{execute_trace, CoalitionId, ContractId, Granularity, Placement, Transaction, TransactionProfile};
use prophet_core::preexec::{simulate_timing, CooperationMode, TxnCost};
use prophet_core::sequencer::{build_order, is_admissible, Candidate, OrderingRule};
use prophet_core::workload::{format_trace, generate, parse_trace, place_contracts, WorkloadParams};

fn params(seed: u64, n_txns: usize, n_contracts: u32, skew: f64) -> WorkloadParams {
    WorkloadParams {
        n_txns,
        n_contracts,
        hotness_skew: skew,
        rng_seed: seed,
        ..WorkloadParams::default()
    }
}

fn candidates(txns: &[Transaction], placement: &Placement) -> Vec<Candidate> {
    txns.iter()
        .map(|t| {
            let out = execute_trace(t, placement, Granularity::StateLevel, &mut BTreeMap::new()).unwrap();
            Candidate {
                txn: t.clone().into(),
                profile: TransactionProfile {
                    txn_id: t.id,
                    rw_set: out.rw_set,
                    messages: out.messages,
                    base_round: 0,
                    coalition: CoalitionId(0),
                }
                .into(),
                deferrals: 0,
            }
        })
        .collect()
}

fn rule() -> impl Strategy<Value = OrderingRule> {
    prop_oneof![
        Just(OrderingRule::CONTRACT),
        Just(OrderingRule::STATE),
        Just(OrderingRule::RWDEP),
        Just(OrderingRule::RWDEP_REORDER),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 32, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn generated_traces_are_valid(seed in any::<u64>(), n in 1usize..200, contracts in 2u32..300, skew in 0.0f64..2.0) {
        let txns = generate(&params(seed, n, contracts, skew)).unwrap();
        prop_assert_eq!(txns.len(), n);
        for t in &txns {
            prop_assert!(t.validate().is_ok());
        }
    }

    #[test]
    fn trace_text_round_trips(seed in any::<u64>(), n in 1usize..100) {
        let txns = generate(&params(seed, n, 50, 1.0)).unwrap();
        let parsed = parse_trace(&format_trace(50, &txns)).unwrap();
        prop_assert_eq!(parsed.txns, txns);
        prop_assert_eq!(parsed.contracts.len(), 50);
    }

    #[test]
    fn built_orders_are_admissible(seed in any::<u64>(), n in 1usize..150, rule in rule()) {
        let txns = generate(&params(seed, n, 100, 1.0)).unwrap();
        let placement = place_contracts((0..100).map(ContractId), 4, seed).unwrap();
        let (order, rejected) = build_order(candidates(&txns, &placement), rule, 1).unwrap();
        prop_assert!(is_admissible(&order, rule).unwrap());
        prop_assert_eq!(order.entries.len() + rejected.len(), n);
    }

    #[test]
    fn reorder_admits_at_least_as_many(seed in any::<u64>(), n in 1usize..150) {
        let txns = generate(&params(seed, n, 100, 1.0)).unwrap();
        let placement = place_contracts((0..100).map(ContractId), 4, seed).unwrap();
        let c = candidates(&txns, &placement);
        let (plain, _) = build_order(c.clone(), OrderingRule::RWDEP, 1).unwrap();
        let (reordered, _) = build_order(c, OrderingRule::RWDEP_REORDER, 1).unwrap();
        prop_assert!(reordered.entries.len() >= plain.entries.len());
    }

    #[test]
    fn cooperation_modes_never_slow_down(costs in prop::collection::vec((0.0f64..50.0, 0.0f64..500.0), 1..60), lanes in 1u32..8) {
        let costs: Vec<TxnCost> = costs.into_iter().map(|(compute_ms, comm_ms)| TxnCost { compute_ms, comm_ms }).collect();
        let seq = simulate_timing(CooperationMode::Sequential, &costs).unwrap().makespan_ms;
        let overlap = simulate_timing(CooperationMode::Overlap, &costs).unwrap().makespan_ms;
        let parallel = simulate_timing(CooperationMode::Parallel(lanes), &costs).unwrap().makespan_ms;
        prop_assert!(overlap <= seq + 1e-9);
        prop_assert!(parallel <= overlap + 1e-9);
    }

    #[test]
    fn cross_shard_share_grows_with_shards(seed in any::<u64>()) {
        let txns = generate(&params(seed, 200, 200, 1.0)).unwrap();
        let share = |n: u32| {
            let placement = place_contracts((0..200).map(ContractId), n, seed).unwrap();
            txns.iter().filter(|t| cross_shard_bytes(t, &placement).unwrap() > 0).count()
        };
        let mut prev = 0;
        for n in [1, 2, 4, 8, 16] {
            let s = share(n);
            prop_assert!(s >= prev, "{} shards: {} < {}", n, s, prev);
            prev = s;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 6, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn small_runs_are_serializable(seed in any::<u64>(), shards in 1u32..6, mech in prop_oneof![
        Just(Mechanism::Prophet), Just(Mechanism::Occ), Just(Mechanism::TwoPhaseLocking)
    ]) {
        let mut cfg = ExperimentConfig {
            mechanism: mech,
            workload: WorkloadParams { n_txns: 60, ..WorkloadParams::conflict_heavy() },
            ..ExperimentConfig::default()
        }
        .with_seed(seed);
        cfg.sim.n_shards = shards;
        let out = run_experiment(&cfg).unwrap();
        prop_assert!(out.report.invariant_violations.is_empty(), "{:?}", out.report.invariant_violations);
        if mech == Mechanism::Prophet {
            prop_assert_eq!(out.confirmed_history.len(), 60);
        }
    }
}
