use crate::model::{ContractId, TxnId};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("granularity mismatch: {0:?} vs {1:?}")]
    GranularityMismatch(crate::model::Granularity, crate::model::Granularity),
    #[error("contract {0} is not placed on any shard")]
    UnplacedContract(ContractId),
    #[error("invalid transaction {txn}: {reason}")]
    InvalidTransaction { txn: TxnId, reason: String },
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("trace line {line}: {reason}")]
    TraceFormat { line: usize, reason: String },
    #[error("event scheduled at {at} before current clock {now}")]
    ScheduleInPast { at: f64, now: f64 },
    #[error("block for round {got} delivered to shard expecting round {expected}")]
    WrongRound { expected: u64, got: u64 },
    #[error("proof rejected: {0}")]
    ProofRejected(String),
    #[error("unknown transaction {0} in history")]
    UnknownTxn(TxnId),
    #[error("config: {0}")]
    Config(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
