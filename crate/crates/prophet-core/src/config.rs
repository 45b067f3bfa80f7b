//! Experiment configuration, read from TOML.
//!
//! Every key is optional and falls back to its default. Unknown keys are
//! rejected with an error that names them.
//!
//! ```toml
//! mechanism = "prophet"          # prophet | occ | 2pl
//! ordering = "rwdep"             # contract | state | rwdep[,reorder]
//! trace_file = "txns.trace"      # replaces the generated workload
//!
//! [workload]
//! n_txns = 10000
//! hotness_skew = 1.0
//!
//! [sim]
//! n_shards = 8
//! malicious_fraction = 0.125
//! consensus_latency = { kind = "fixed", ms = 500.0 }
//!
//! [prophet]
//! mode = "parallel:32"           # sequential | overlap | parallel:<p>
//! dispatch = "pipelined"         # pipelined | serial
//!
//! [baseline]
//! max_retry = 10
//! ```

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preexec::CooperationMode;
use crate::sequencer::{DispatchMode, OrderingRule};
use crate::simnet::SimConfig;
use crate::workload::WorkloadParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub enum Mechanism {
    #[default]
    #[serde(rename = "prophet")]
    Prophet,
    #[serde(rename = "occ")]
    Occ,
    #[serde(rename = "2pl")]
    TwoPhaseLocking,
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mechanism::Prophet => "prophet",
            Mechanism::Occ => "occ",
            Mechanism::TwoPhaseLocking => "2pl",
        })
    }
}

impl FromStr for Mechanism {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prophet" => Ok(Self::Prophet),
            "occ" => Ok(Self::Occ),
            "2pl" => Ok(Self::TwoPhaseLocking),
            other => Err(Error::Config(format!(
                "mechanism must be prophet, occ or 2pl, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProphetParams {
    pub n_coalitions: u32,
    pub mode: CooperationMode,
    /// Most transactions one coalition takes per pre-execution pass.
    pub batch_size: usize,
    /// Sequencing happens every interval, or earlier once `sequence_threshold`
    /// profiles are waiting.
    pub round_interval_ms: f64,
    pub sequence_threshold: usize,
    pub dispatch: DispatchMode,
    /// Rejected transactions are pre-executed again instead of re-proposed
    /// with their old profile.
    pub re_preexecute: bool,
    /// Invalidated transactions go back to the pending pool.
    pub retry_invalidated: bool,
    pub churn: bool,
    /// Hard stop for the sequencer; 0 means run until every transaction is
    /// confirmed.
    pub max_rounds: u64,
}

impl Default for ProphetParams {
    fn default() -> Self {
        Self {
            n_coalitions: 8,
            mode: CooperationMode::Parallel(32),
            batch_size: 500,
            round_interval_ms: 1000.0,
            sequence_threshold: 1000,
            dispatch: DispatchMode::Pipelined,
            re_preexecute: true,
            retry_invalidated: true,
            churn: true,
            max_rounds: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineParams {
    pub max_retry: u32,
}

impl Default for BaselineParams {
    fn default() -> Self {
        Self { max_retry: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mechanism: Mechanism,
    pub ordering: OrderingRule,
    pub trace_file: Option<PathBuf>,
    pub workload: WorkloadParams,
    pub sim: SimConfig,
    pub prophet: ProphetParams,
    pub baseline: BaselineParams,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_toml_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(trace) = &cfg.trace_file {
            if trace.is_relative() {
                if let Some(dir) = path.parent() {
                    cfg.trace_file = Some(dir.join(trace));
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Uses one seed for the workload, the node assignment and all
    /// simulation randomness.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.workload.rng_seed = seed;
        self.sim.rng_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.workload
            .validate()
            .map_err(|e| Error::Config(format!("workload: {e}")))?;
        let p = &self.prophet;
        if p.n_coalitions == 0 {
            return Err(Error::Config("prophet.n_coalitions must be positive".into()));
        }
        if p.n_coalitions > self.sim.nodes_per_shard {
            return Err(Error::Config(
                "prophet.n_coalitions cannot exceed sim.nodes_per_shard".into(),
            ));
        }
        if p.mode == CooperationMode::Parallel(0) {
            return Err(Error::Config("prophet.mode needs at least one lane".into()));
        }
        if p.batch_size == 0 || p.sequence_threshold == 0 {
            return Err(Error::Config(
                "prophet.batch_size and prophet.sequence_threshold must be positive".into(),
            ));
        }
        if !(p.round_interval_ms > 0.0 && p.round_interval_ms.is_finite()) {
            return Err(Error::Config("prophet.round_interval_ms must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(ExperimentConfig::from_toml_str("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn unknown_key_is_named() {
        for text in ["mechanizm = \"occ\"", "[sim]\nshards = 4", "[prophet]\nbatch = 3"] {
            let err = ExperimentConfig::from_toml_str(text).unwrap_err().to_string();
            let key = text.split(['\n', ' ']).find(|t| !t.starts_with('[')).unwrap();
            assert!(err.contains(key), "{err}");
        }
    }

    #[test]
    fn parses_documented_example() {
        let text = r#"
            mechanism = "2pl"
            ordering = "rwdep,reorder"
            [workload]
            n_txns = 50
            [sim]
            n_shards = 8
            fault_threshold = "1/2"
            consensus_latency = { kind = "fixed", ms = 250.0 }
            [prophet]
            mode = "overlap"
            dispatch = "serial"
        "#;
        let cfg = ExperimentConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.mechanism, Mechanism::TwoPhaseLocking);
        assert_eq!(cfg.ordering, OrderingRule::RWDEP_REORDER);
        assert_eq!(cfg.sim.n_shards, 8);
        assert_eq!(cfg.prophet.mode, CooperationMode::Overlap);
        assert_eq!(cfg.prophet.dispatch, DispatchMode::Serial);
        let again = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn bad_values_rejected() {
        assert!(ExperimentConfig::from_toml_str("mechanism = \"3pc\"").is_err());
        assert!(ExperimentConfig::from_toml_str("[sim]\nn_shards = 0").is_err());
        assert!(ExperimentConfig::from_toml_str("[prophet]\nmode = \"parallel:0\"").is_err());
    }

    #[test]
    fn seed_applies_everywhere() {
        let cfg = ExperimentConfig::default().with_seed(9);
        assert_eq!((cfg.workload.rng_seed, cfg.sim.rng_seed), (9, 9));
    }
}
