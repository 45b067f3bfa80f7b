//! Run reports and their CSV/JSON encodings, plus the shard-security table.
//!
//! CSV schema, one row per round followed by one summary row per report:
//!
//! | column | round rows | summary row |
//! |---|---|---|
//! | `kind` | `round` | `summary` |
//! | `mechanism`, `ordering`, `n_shards`, `seed` | run identity | run identity |
//! | `round` | round number | empty |
//! | `candidates`, `rejected`, `sequenced`, `invalid` | sequencer counts | totals |
//! | `confirmed`, `aborted` | outcomes settled in that round | totals |
//! | `throughput_tps` | empty | confirmed per simulated second |
//! | `latency_mean_ms`, `latency_p50_ms`, `latency_p95_ms` | empty | confirmation latency |
//! | `abort_ratio`, `invalid_ratio`, `conflict_ratio` | per round | whole run |
//! | `mean_cross_shard_bytes` | empty | per transaction |

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::Mechanism;
use crate::error::{Error, Result};
use crate::runtime::HistoryRecord;
use crate::sequencer::OrderingRule;
use crate::simnet::{shard_failure_probability, SimConfig};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundStats {
    pub round: u64,
    pub candidates: u64,
    /// Rejected by the admission rule this round.
    pub rejected: u64,
    pub sequenced: u64,
    /// Sequenced entries some verdict marked invalid.
    pub invalid: u64,
    /// Of the invalid ones, those whose profile was corrupted on purpose.
    pub invalid_corrupted: u64,
    pub confirmed: u64,
    pub aborted: u64,
    /// Attempts that ended in an abort (baselines only).
    pub attempt_aborts: u64,
    pub attempts: u64,
}

impl RoundStats {
    pub fn conflict_ratio(&self) -> f64 {
        ratio(self.rejected, self.candidates)
    }

    pub fn invalid_ratio(&self) -> f64 {
        ratio(self.invalid, self.sequenced)
    }

    pub fn abort_ratio(&self) -> f64 {
        ratio(self.attempt_aborts, self.attempts)
    }
}

pub fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
}

impl LatencySummary {
    /// Nearest-rank percentiles.
    pub fn from_samples(samples: &[f64]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        let mut s = samples.to_vec();
        s.sort_by(f64::total_cmp);
        let rank = |p: f64| s[((p * s.len() as f64).ceil() as usize).clamp(1, s.len()) - 1];
        Self {
            mean_ms: s.iter().sum::<f64>() / s.len() as f64,
            p50_ms: rank(0.5),
            p95_ms: rank(0.95),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mechanism: Mechanism,
    pub ordering: OrderingRule,
    pub n_shards: u32,
    pub seed: u64,
    pub n_txns: u64,
    pub confirmed: u64,
    /// Permanently aborted after exhausting retries.
    pub aborted: u64,
    /// Neither confirmed nor aborted when the run stopped.
    pub unresolved: u64,
    pub sim_duration_ms: f64,
    pub throughput_tps: f64,
    pub latency: LatencySummary,
    /// Aborted attempts over all attempts.
    pub abort_ratio: f64,
    /// Permanently aborted transactions over all transactions.
    pub permanent_abort_ratio: f64,
    pub invalid_ratio: f64,
    pub conflict_ratio: f64,
    pub mean_cross_shard_bytes: f64,
    pub cross_shard_fraction: f64,
    /// Corrupted profiles that were nevertheless confirmed.
    pub corrupted_confirmed: u64,
    pub event_digest: String,
    pub invariant_violations: Vec<String>,
    pub rounds: Vec<RoundStats>,
    pub history: Vec<HistoryRecord>,
}

impl MetricsReport {
    pub fn new(mechanism: Mechanism, ordering: OrderingRule, n_shards: u32, seed: u64) -> Self {
        Self {
            mechanism,
            ordering,
            n_shards,
            seed,
            n_txns: 0,
            confirmed: 0,
            aborted: 0,
            unresolved: 0,
            sim_duration_ms: 0.0,
            throughput_tps: 0.0,
            latency: LatencySummary::default(),
            abort_ratio: 0.0,
            permanent_abort_ratio: 0.0,
            invalid_ratio: 0.0,
            conflict_ratio: 0.0,
            mean_cross_shard_bytes: 0.0,
            cross_shard_fraction: 0.0,
            corrupted_confirmed: 0,
            event_digest: String::new(),
            invariant_violations: Vec::new(),
            rounds: Vec::new(),
            history: Vec::new(),
        }
    }

    /// Fills every derived summary field from the counters and the latency
    /// samples.
    pub fn finish(&mut self, latencies: &[f64]) {
        let sum = |f: fn(&RoundStats) -> u64| self.rounds.iter().map(f).sum::<u64>();
        self.conflict_ratio = ratio(sum(|r| r.rejected), sum(|r| r.candidates));
        self.invalid_ratio = ratio(sum(|r| r.invalid), sum(|r| r.sequenced));
        self.abort_ratio = ratio(sum(|r| r.attempt_aborts), sum(|r| r.attempts));
        self.permanent_abort_ratio = ratio(self.aborted, self.n_txns);
        self.throughput_tps = if self.sim_duration_ms > 0.0 {
            self.confirmed as f64 * 1000.0 / self.sim_duration_ms
        } else {
            0.0
        };
        self.latency = LatencySummary::from_samples(latencies);
    }

    /// Mean invalid ratio over rounds `from..=to` that sequenced anything.
    pub fn mean_invalid_ratio(&self, from: u64, to: u64) -> f64 {
        let picked: Vec<f64> = self
            .rounds
            .iter()
            .filter(|r| r.round >= from && r.round <= to && r.sequenced > 0)
            .map(RoundStats::invalid_ratio)
            .collect();
        if picked.is_empty() {
            0.0
        } else {
            picked.iter().sum::<f64>() / picked.len() as f64
        }
    }

    /// Invalid entries over sequenced entries for rounds after `round`.
    pub fn invalid_ratio_after(&self, round: u64) -> f64 {
        let later = self.rounds.iter().filter(|r| r.round > round);
        let (inv, seq) = later.fold((0, 0), |(i, s), r| (i + r.invalid, s + r.sequenced));
        ratio(inv, seq)
    }

    fn rows(&self) -> Vec<CsvRow> {
        let base = CsvRow {
            kind: "round",
            mechanism: self.mechanism.to_string(),
            ordering: self.ordering.to_string(),
            n_shards: self.n_shards,
            seed: self.seed,
            ..CsvRow::default()
        };
        let mut rows: Vec<CsvRow> = self
            .rounds
            .iter()
            .map(|r| CsvRow {
                round: Some(r.round),
                candidates: r.candidates,
                rejected: r.rejected,
                sequenced: r.sequenced,
                invalid: r.invalid,
                confirmed: r.confirmed,
                aborted: r.aborted,
                abort_ratio: r.abort_ratio(),
                invalid_ratio: r.invalid_ratio(),
                conflict_ratio: r.conflict_ratio(),
                ..base.clone()
            })
            .collect();
        let sum = |f: fn(&RoundStats) -> u64| self.rounds.iter().map(f).sum::<u64>();
        rows.push(CsvRow {
            kind: "summary",
            candidates: sum(|r| r.candidates),
            rejected: sum(|r| r.rejected),
            sequenced: sum(|r| r.sequenced),
            invalid: sum(|r| r.invalid),
            confirmed: self.confirmed,
            aborted: self.aborted,
            throughput_tps: Some(self.throughput_tps),
            latency_mean_ms: Some(self.latency.mean_ms),
            latency_p50_ms: Some(self.latency.p50_ms),
            latency_p95_ms: Some(self.latency.p95_ms),
            abort_ratio: self.abort_ratio,
            invalid_ratio: self.invalid_ratio,
            conflict_ratio: self.conflict_ratio,
            mean_cross_shard_bytes: Some(self.mean_cross_shard_bytes),
            ..base
        });
        rows
    }
}

pub const CSV_COLUMNS: [&str; 20] = [
    "kind",
    "mechanism",
    "ordering",
    "n_shards",
    "seed",
    "round",
    "candidates",
    "rejected",
    "sequenced",
    "invalid",
    "confirmed",
    "aborted",
    "throughput_tps",
    "latency_mean_ms",
    "latency_p50_ms",
    "latency_p95_ms",
    "abort_ratio",
    "invalid_ratio",
    "conflict_ratio",
    "mean_cross_shard_bytes",
];

#[derive(Debug, Clone, Default, Serialize)]
struct CsvRow {
    kind: &'static str,
    mechanism: String,
    ordering: String,
    n_shards: u32,
    seed: u64,
    round: Option<u64>,
    candidates: u64,
    rejected: u64,
    sequenced: u64,
    invalid: u64,
    confirmed: u64,
    aborted: u64,
    throughput_tps: Option<f64>,
    latency_mean_ms: Option<f64>,
    latency_p50_ms: Option<f64>,
    latency_p95_ms: Option<f64>,
    abort_ratio: f64,
    invalid_ratio: f64,
    conflict_ratio: f64,
    mean_cross_shard_bytes: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Csv,
    Json,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            other => Err(Error::Config(format!("format must be csv or json, got {other:?}"))),
        }
    }
}

pub fn write_csv(reports: &[MetricsReport], out: impl Write) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CSV_COLUMNS).map_err(csv_err)?;
    for report in reports {
        for row in report.rows() {
            w.serialize(row).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_json(reports: &[MetricsReport], out: impl Write) -> Result<()> {
    serde_json::to_writer_pretty(out, reports)?;
    Ok(())
}

pub fn emit(reports: &[MetricsReport], format: Format, path: impl AsRef<Path>) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    match format {
        Format::Csv => write_csv(reports, file),
        Format::Json => write_json(reports, file),
    }
}

/// Confirmed-history export, one record per sequenced instance.
pub fn write_history_csv(history: &[HistoryRecord], out: impl Write) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(["round", "position", "txn_id", "status", "confirm_time_ms"])
        .map_err(csv_err)?;
    for h in history {
        let status = match h.status {
            crate::runtime::Status::Pending => "pending",
            crate::runtime::Status::Confirmed => "confirmed",
            crate::runtime::Status::Invalidated => "invalidated",
        };
        let time = h.confirm_time_ms.map(|t| t.to_string()).unwrap_or_default();
        w.write_record([
            h.round.to_string(),
            h.position.to_string(),
            h.txn_id.0.to_string(),
            status.to_string(),
            time,
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecurityRow {
    pub shard_size: u64,
    pub failure_probability: f64,
    pub meets_target: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SecurityReport {
    pub total_nodes: u64,
    pub malicious: u64,
    pub target: f64,
    pub rows: Vec<SecurityRow>,
    /// Smallest shard size whose failure probability is at most `target`.
    pub min_shard_size: Option<u64>,
}

/// Failure probability per shard size for the network described by `sim`,
/// and the smallest size reaching `2^-λ`. Sizes above the network population
/// are skipped.
pub fn security_report(sim: &SimConfig, shard_sizes: &[u64]) -> Result<SecurityReport> {
    let n = u64::from(sim.n_shards) * u64::from(sim.nodes_per_shard);
    let malicious = (sim.malicious_fraction * n as f64).round() as u64;
    let target = 2f64.powi(-(sim.security_lambda as i32));
    let rows = shard_sizes
        .iter()
        .filter(|&&m| m <= n)
        .map(|&m| {
            let p = shard_failure_probability(n, m, malicious, sim.fault_threshold)?;
            Ok(SecurityRow {
                shard_size: m,
                failure_probability: p,
                meets_target: p <= target,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut min_shard_size = None;
    for m in 1..=n {
        if shard_failure_probability(n, m, malicious, sim.fault_threshold)? <= target {
            min_shard_size = Some(m);
            break;
        }
    }
    Ok(SecurityReport {
        total_nodes: n,
        malicious,
        target,
        rows,
        min_shard_size,
    })
}
