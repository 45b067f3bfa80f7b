//! OCC and 2PL cross-shard baselines.
//!
//! Both run on the same network and consensus model as Prophet. Each shard
//! processes requests in back-to-back consensus rounds: a round starts with
//! whatever has arrived, lasts one consensus draw plus the compute of its
//! requests, and its effects become visible when it ends.
//!
//! A transaction is split into hops, the maximal runs of consecutive trace
//! segments that execute on one shard.
//!
//! * OCC executes hop by hop, recording the version of every key it touches.
//!   The final hop validates all recorded versions and either applies the
//!   writes atomically or aborts. Aborted attempts restart from the entry
//!   shard, up to `max_retry` times.
//! * 2PL first asks every involved shard for exclusive locks on the keys it
//!   will touch. A single denial releases everything and retries. Once all
//!   locks are held the hops execute and the writes are applied at the last
//!   hop, after which the locks are released. Single-shard transactions run
//!   inside one round and are deferred while any of their keys is locked.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ExperimentConfig, Mechanism};
use crate::engine::{check_outcome, describe_workload, RunOutput};
use crate::error::{Error, Result};
use crate::metrics::{MetricsReport, RoundStats};
use crate::model::{
    execute_trace, Granularity, Placement, ShardId, Step, StorageKey, Transaction, TxnId, Value,
};
use crate::runtime::{HistoryRecord, Status};
use crate::simnet::{transfer_time, EventLog, EventQueue};

/// Size of a control message (lock request, grant, abort notice).
const CONTROL_BYTES: u64 = 64;

/// One same-shard stretch of a trace.
#[derive(Debug, Clone, PartialEq)]
pub struct Hop {
    pub shard: ShardId,
    pub keys: BTreeSet<StorageKey>,
    pub compute_ms: f64,
    /// Bytes carried to the next hop.
    pub forward_bytes: u64,
}

/// Splits a trace into hops.
pub fn hops(txn: &Transaction, placement: &Placement) -> Result<Vec<Hop>> {
    let entry = txn.entry_contract().ok_or_else(|| Error::InvalidTransaction {
        txn: txn.id,
        reason: "empty trace".into(),
    })?;
    let mut out = vec![Hop {
        shard: placement.shard(entry)?,
        keys: BTreeSet::new(),
        compute_ms: 0.0,
        forward_bytes: 0,
    }];
    for step in &txn.trace {
        let hop = out.last_mut().expect("non-empty");
        match step {
            Step::Compute { cost_ms } => hop.compute_ms += cost_ms,
            Step::Read(k) | Step::Write(k) => {
                hop.keys.insert(*k);
            }
            Step::Call {
                to,
                payload_bytes,
                return_bytes,
            } => {
                let next = placement.shard(*to)?;
                if next != hop.shard {
                    hop.forward_bytes = u64::from(*payload_bytes) + u64::from(*return_bytes);
                    out.push(Hop {
                        shard: next,
                        keys: BTreeSet::new(),
                        compute_ms: 0.0,
                        forward_bytes: 0,
                    });
                }
            }
        }
    }
    Ok(out)
}

/// Attempt bookkeeping shared by both baselines.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RetryState {
    pub attempts: u32,
    pub aborts: u32,
}

impl RetryState {
    /// Records a failed attempt. Returns whether another one is allowed.
    pub fn abort(&mut self, max_retry: u32) -> bool {
        self.aborts += 1;
        self.aborts <= max_retry
    }
}

#[derive(Debug, Clone, Copy)]
enum Req {
    OccHop { idx: usize, attempt: u32, hop: usize },
    Lock { idx: usize, attempt: u32 },
    ExecHop { idx: usize, hop: usize },
    Local { idx: usize },
}

#[derive(Debug)]
enum Ev {
    Issue { idx: usize },
    Arrive { shard: ShardId, req: Req },
    RoundEnd { shard: ShardId },
    Reply { idx: usize, attempt: u32, granted: bool },
}

#[derive(Default)]
struct ShardQueue {
    incoming: VecDeque<Req>,
    current: Vec<Req>,
    busy: bool,
    rounds: u64,
}

struct Baseline<'a> {
    cfg: &'a ExperimentConfig,
    mechanism: Mechanism,
    txns: Vec<Transaction>,
    placement: Placement,
    hops: Vec<Vec<Hop>>,
    queue: EventQueue<Ev>,
    log: EventLog,
    rng: ChaCha8Rng,
    shards: Vec<ShardQueue>,

    state: BTreeMap<StorageKey, Value>,
    versions: HashMap<StorageKey, u64>,
    locks: HashMap<StorageKey, usize>,

    retry: Vec<RetryState>,
    read_versions: Vec<BTreeMap<StorageKey, u64>>,
    replies: Vec<(usize, bool)>,
    held: Vec<BTreeSet<ShardId>>,

    history: Vec<HistoryRecord>,
    rounds: BTreeMap<u64, RoundStats>,
    latencies: Vec<f64>,
    aborted: u64,
    last_commit: f64,
}

impl<'a> Baseline<'a> {
    fn new(cfg: &'a ExperimentConfig, mechanism: Mechanism, txns: Vec<Transaction>, placement: Placement) -> Result<Self> {
        let hops = txns.iter().map(|t| hops(t, &placement)).collect::<Result<Vec<_>>>()?;
        let n = txns.len();
        Ok(Self {
            cfg,
            mechanism,
            hops,
            queue: EventQueue::new(),
            log: EventLog::default(),
            rng: ChaCha8Rng::seed_from_u64(cfg.sim.rng_seed ^ 0xba5e_11e5),
            shards: (0..cfg.sim.n_shards).map(|_| ShardQueue::default()).collect(),
            state: BTreeMap::new(),
            versions: HashMap::new(),
            locks: HashMap::new(),
            retry: vec![RetryState::default(); n],
            read_versions: vec![BTreeMap::new(); n],
            replies: vec![(0, true); n],
            held: vec![BTreeSet::new(); n],
            history: Vec::new(),
            rounds: BTreeMap::new(),
            latencies: Vec::new(),
            aborted: 0,
            last_commit: 0.0,
            txns,
            placement,
        })
    }

    fn run(mut self) -> Result<RunOutput> {
        for idx in 0..self.txns.len() {
            let at = self.txns[idx].issue_time_ms.max(0.0);
            self.queue.schedule(at, Ev::Issue { idx })?;
        }
        while let Some(ev) = self.queue.next() {
            self.log.record(ev.fire_time, ev.seq_no, &format!("{:?}", ev.kind));
            match ev.kind {
                Ev::Issue { idx } => self.start_attempt(idx, 0.0)?,
                Ev::Arrive { shard, req } => {
                    self.shards[shard.0 as usize].incoming.push_back(req);
                    self.maybe_start_round(shard)?;
                }
                Ev::RoundEnd { shard } => self.end_round(shard)?,
                Ev::Reply { idx, attempt, granted } => self.on_reply(idx, attempt, granted)?,
            }
        }
        self.finish()
    }

    fn involved(&self, idx: usize) -> BTreeSet<ShardId> {
        self.hops[idx].iter().map(|h| h.shard).collect()
    }

    fn keys_on(&self, idx: usize, shard: ShardId) -> BTreeSet<StorageKey> {
        self.hops[idx]
            .iter()
            .filter(|h| h.shard == shard)
            .flat_map(|h| h.keys.iter().copied())
            .collect()
    }

    fn start_attempt(&mut self, idx: usize, delay: f64) -> Result<()> {
        self.retry[idx].attempts += 1;
        let attempt = self.retry[idx].attempts;
        let entry = self.hops[idx][0].shard;
        let req = match self.mechanism {
            Mechanism::Occ => {
                self.read_versions[idx].clear();
                Req::OccHop { idx, attempt, hop: 0 }
            }
            _ if self.hops[idx].len() == 1 => Req::Local { idx },
            _ => {
                let involved = self.involved(idx);
                self.replies[idx] = (involved.len(), true);
                for shard in involved {
                    let d = delay + transfer_time(CONTROL_BYTES, &self.cfg.sim);
                    self.queue.schedule_in(d, Ev::Arrive { shard, req: Req::Lock { idx, attempt } })?;
                }
                return Ok(());
            }
        };
        self.queue.schedule_in(delay, Ev::Arrive { shard: entry, req })?;
        Ok(())
    }

    fn maybe_start_round(&mut self, shard: ShardId) -> Result<()> {
        let q = &mut self.shards[shard.0 as usize];
        if q.busy || q.incoming.is_empty() {
            return Ok(());
        }
        q.busy = true;
        q.rounds += 1;
        q.current = q.incoming.drain(..).collect();
        let compute: f64 = q
            .current
            .iter()
            .map(|r| match *r {
                Req::OccHop { idx, hop, .. } | Req::ExecHop { idx, hop } => self.hops[idx][hop].compute_ms,
                Req::Local { idx } => self.hops[idx][0].compute_ms,
                Req::Lock { .. } => 0.0,
            })
            .sum();
        let consensus = self.cfg.sim.consensus_latency.sample(&mut self.rng);
        self.queue.schedule_in(compute + consensus, Ev::RoundEnd { shard })?;
        Ok(())
    }

    fn stats(&mut self, shard: ShardId) -> &mut RoundStats {
        let round = self.shards[shard.0 as usize].rounds;
        let s = self.rounds.entry(round).or_default();
        s.round = round;
        s
    }

    fn end_round(&mut self, shard: ShardId) -> Result<()> {
        let s = shard.0 as usize;
        let current = std::mem::take(&mut self.shards[s].current);
        let mut deferred = Vec::new();
        for req in current {
            match req {
                Req::OccHop { idx, attempt, hop } => self.occ_hop(shard, idx, attempt, hop)?,
                Req::Lock { idx, attempt } => {
                    let keys = self.keys_on(idx, shard);
                    let granted = keys.iter().all(|k| self.locks.get(k).is_none_or(|o| *o == idx));
                    if granted {
                        for k in keys {
                            self.locks.insert(k, idx);
                        }
                        self.held[idx].insert(shard);
                    }
                    let d = transfer_time(CONTROL_BYTES, &self.cfg.sim);
                    self.queue.schedule_in(d, Ev::Reply { idx, attempt, granted })?;
                }
                Req::ExecHop { idx, hop } => {
                    if hop + 1 < self.hops[idx].len() {
                        self.forward(idx, hop, |hop| Req::ExecHop { idx, hop })?;
                    } else {
                        self.commit(idx, shard)?;
                        let held = std::mem::take(&mut self.held[idx]);
                        self.release(idx, &held);
                    }
                }
                Req::Local { idx } => {
                    let keys = self.keys_on(idx, shard);
                    if keys.iter().any(|k| self.locks.contains_key(k)) {
                        deferred.push(req);
                    } else {
                        self.commit(idx, shard)?;
                    }
                }
            }
        }
        let q = &mut self.shards[s];
        q.busy = false;
        for req in deferred.into_iter().rev() {
            q.incoming.push_front(req);
        }
        self.maybe_start_round(shard)
    }

    fn forward(&mut self, idx: usize, hop: usize, make: impl Fn(usize) -> Req) -> Result<()> {
        let next = &self.hops[idx][hop + 1];
        let bytes = self.hops[idx][hop].forward_bytes;
        let d = transfer_time(bytes, &self.cfg.sim);
        self.queue.schedule_in(d, Ev::Arrive { shard: next.shard, req: make(hop + 1) })?;
        Ok(())
    }

    fn occ_hop(&mut self, shard: ShardId, idx: usize, attempt: u32, hop: usize) -> Result<()> {
        if attempt != self.retry[idx].attempts {
            return Ok(());
        }
        for k in self.hops[idx][hop].keys.clone() {
            let v = self.versions.get(&k).copied().unwrap_or(0);
            self.read_versions[idx].entry(k).or_insert(v);
        }
        if hop + 1 < self.hops[idx].len() {
            return self.forward(idx, hop, |hop| Req::OccHop { idx, attempt, hop });
        }
        let fresh = self.read_versions[idx]
            .iter()
            .all(|(k, v)| self.versions.get(k).copied().unwrap_or(0) == *v);
        if fresh {
            self.commit(idx, shard)
        } else {
            self.fail_attempt(idx, shard)
        }
    }

    fn on_reply(&mut self, idx: usize, attempt: u32, granted: bool) -> Result<()> {
        if attempt != self.retry[idx].attempts {
            return Ok(());
        }
        let (left, ok) = &mut self.replies[idx];
        *left -= 1;
        *ok &= granted;
        if *left > 0 {
            return Ok(());
        }
        if *ok {
            let entry = self.hops[idx][0].shard;
            let d = transfer_time(CONTROL_BYTES, &self.cfg.sim);
            self.queue.schedule_in(d, Ev::Arrive { shard: entry, req: Req::ExecHop { idx, hop: 0 } })?;
            Ok(())
        } else {
            let held = std::mem::take(&mut self.held[idx]);
            self.release(idx, &held);
            let entry = self.hops[idx][0].shard;
            self.fail_attempt(idx, entry)
        }
    }

    fn release(&mut self, idx: usize, shards: &BTreeSet<ShardId>) {
        for shard in shards {
            for k in self.keys_on(idx, *shard) {
                if self.locks.get(&k) == Some(&idx) {
                    self.locks.remove(&k);
                }
            }
        }
    }

    fn fail_attempt(&mut self, idx: usize, shard: ShardId) -> Result<()> {
        let stats = self.stats(shard);
        stats.attempts += 1;
        stats.attempt_aborts += 1;
        if self.retry[idx].abort(self.cfg.baseline.max_retry) {
            self.start_attempt(idx, transfer_time(CONTROL_BYTES, &self.cfg.sim))
        } else {
            self.stats(shard).aborted += 1;
            self.aborted += 1;
            Ok(())
        }
    }

    fn commit(&mut self, idx: usize, shard: ShardId) -> Result<()> {
        let now = self.queue.now();
        let txn = &self.txns[idx];
        let out = execute_trace(txn, &self.placement, Granularity::StateLevel, &mut self.state)?;
        for (k, v) in out.writes {
            self.state.insert(k, v);
            *self.versions.entry(k).or_insert(0) += 1;
        }
        self.latencies.push(now - txn.issue_time_ms);
        self.last_commit = now;
        let round = self.shards[shard.0 as usize].rounds;
        self.history.push(HistoryRecord {
            round,
            position: self.history.len() as u32,
            txn_id: txn.id,
            status: Status::Confirmed,
            confirm_time_ms: Some(now),
        });
        let stats = self.stats(shard);
        stats.attempts += 1;
        stats.sequenced += 1;
        stats.candidates += 1;
        stats.confirmed += 1;
        Ok(())
    }

    fn finish(self) -> Result<RunOutput> {
        let cfg = self.cfg;
        let mut report = MetricsReport::new(self.mechanism, cfg.ordering, cfg.sim.n_shards, cfg.sim.rng_seed);
        describe_workload(&mut report, &self.txns, &self.placement)?;
        let history: Vec<TxnId> = self.history.iter().map(|h| h.txn_id).collect();
        report.confirmed = history.len() as u64;
        report.aborted = self.aborted;
        report.unresolved = report.n_txns - report.confirmed - report.aborted;
        report.sim_duration_ms = self.last_commit;
        report.rounds = self.rounds.into_values().collect();
        report.history = self.history;
        report.finish(&self.latencies);
        report.event_digest = self.log.digest_hex();
        report.invariant_violations = check_outcome(&self.txns, &self.placement, &history, &self.state)?;
        if report.unresolved > 0 {
            report
                .invariant_violations
                .push(format!("{} transactions never resolved", report.unresolved));
        }
        Ok(RunOutput {
            report,
            confirmed_history: history,
            confirmed_state: self.state,
        })
    }
}

pub fn run_occ(cfg: &ExperimentConfig, txns: Vec<Transaction>, placement: Placement) -> Result<RunOutput> {
    Baseline::new(cfg, Mechanism::Occ, txns, placement)?.run()
}

pub fn run_2pl(cfg: &ExperimentConfig, txns: Vec<Transaction>, placement: Placement) -> Result<RunOutput> {
    Baseline::new(cfg, Mechanism::TwoPhaseLocking, txns, placement)?.run()
}
