//! Scenario files: one strict JSON document wiring workload, strategy,
//! endorsement policy, channels and service-time models.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::endorsement::{EndorsementPolicy, PolicyError};
use crate::ledger::Tick;
use crate::ordering::OrderingStrategy;
use crate::workload::{WorkloadConfig, WorkloadError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read scenario: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid scenario JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Workload(#[from] WorkloadError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("{0}")]
    Invalid(String),
}

/// Lognormal stage time in ticks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct StageTime {
    pub median: f64,
    #[serde(default)]
    pub sigma: f64,
}

impl StageTime {
    pub const fn new(median: f64, sigma: f64) -> Self {
        Self { median, sigma }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ServiceTimes {
    /// One endorser executing one transaction.
    pub endorse: StageTime,
    /// Dependency analysis of one transaction; defaults to the ordering
    /// median divided by 0.6.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analyze: Option<StageTime>,
    /// Ordering one transaction inside a channel.
    pub order: StageTime,
    /// Validating and applying one block.
    pub validate: StageTime,
}

impl Default for ServiceTimes {
    fn default() -> Self {
        Self {
            endorse: StageTime::new(20.0, 0.3),
            analyze: None,
            order: StageTime::new(4.0, 0.3),
            validate: StageTime::new(2.0, 0.2),
        }
    }
}

impl ServiceTimes {
    pub fn analyze_time(&self) -> StageTime {
        self.analyze
            .unwrap_or(StageTime::new(self.order.median / 0.6, self.order.sigma))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ChannelConfig {
    pub count: u32,
    pub queue_limit: usize,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            count: 4,
            queue_limit: 32,
        }
    }
}

/// How far behind the commit frontier endorsers execute, in blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct LagConfig {
    pub max_blocks: u32,
    /// Draw a lag per endorser instead of one per transaction.
    #[serde(default)]
    pub per_endorser: bool,
}

impl Default for LagConfig {
    fn default() -> Self {
        Self {
            max_blocks: 2,
            per_endorser: false,
        }
    }
}

fn default_scan_window() -> usize {
    64
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Flags {
    #[serde(default)]
    pub exclusive_read_locks: bool,
    /// Defaults to on for ConChainParallel and off otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dependency_manager_enabled: Option<bool>,
    #[serde(default = "default_scan_window")]
    pub scan_window: usize,
    /// Parallel dependency-manager workers; defaults to the channel count
    /// under ConChainParallel and 1 otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dm_workers: Option<u32>,
    /// Re-verify the lock table after every assigner mutation.
    #[serde(default = "yes")]
    pub check_invariants: bool,
}

impl Default for Flags {
    fn default() -> Self {
        Self {
            exclusive_read_locks: false,
            dependency_manager_enabled: None,
            scan_window: default_scan_window(),
            dm_workers: None,
            check_invariants: true,
        }
    }
}

fn default_block_size() -> usize {
    10
}

fn default_batch_timeout() -> Tick {
    2000
}

fn default_sync_penalty() -> Tick {
    50
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Seeds service times and endorser lag; the workload has its own seed.
    pub seed: u64,
    pub workload: WorkloadConfig,
    pub strategy: OrderingStrategy,
    #[serde(default)]
    pub policy: EndorsementPolicy,
    #[serde(default)]
    pub channels: ChannelConfig,
    #[serde(default = "default_block_size")]
    pub block_size: usize,
    #[serde(default = "default_batch_timeout")]
    pub batch_timeout: Tick,
    #[serde(default)]
    pub service_times: ServiceTimes,
    #[serde(default)]
    pub endorser_lag: LagConfig,
    /// Reorder window for Timestamping and Grouping; defaults to
    /// `batchTimeout`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reorder_window: Option<Tick>,
    /// Extra delay before endorsement under Timestamping, paid for keeping
    /// peers in sync.
    #[serde(default = "default_sync_penalty")]
    pub sync_penalty: Tick,
    #[serde(default)]
    pub flags: Flags,
}

impl ScenarioConfig {
    pub fn new(seed: u64, workload: WorkloadConfig, strategy: OrderingStrategy) -> Self {
        Self {
            seed,
            workload,
            strategy,
            policy: EndorsementPolicy::default(),
            channels: ChannelConfig::default(),
            block_size: default_block_size(),
            batch_timeout: default_batch_timeout(),
            service_times: ServiceTimes::default(),
            endorser_lag: LagConfig::default(),
            reorder_window: None,
            sync_penalty: default_sync_penalty(),
            flags: Flags::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn dependency_manager(&self) -> bool {
        self.flags
            .dependency_manager_enabled
            .unwrap_or_else(|| self.strategy.default_dependency_manager())
    }

    /// Number of orderer channels actually run.
    pub fn channel_count(&self) -> u32 {
        match self.strategy {
            OrderingStrategy::ConChainParallel => self.channels.count,
            _ => 1,
        }
    }

    pub fn dm_workers(&self) -> u32 {
        self.flags.dm_workers.unwrap_or(self.channel_count())
    }

    pub fn reorder_window(&self) -> Tick {
        self.reorder_window.unwrap_or(self.batch_timeout)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |msg: &str| Err(ConfigError::Invalid(msg.to_string()));
        self.workload.validate()?;
        self.policy.validate()?;
        if self.channels.count == 0 {
            return invalid("channels.count must be at least 1");
        }
        if self.channels.queue_limit == 0 {
            return invalid("channels.queueLimit must be at least 1");
        }
        if self.block_size == 0 {
            return invalid("blockSize must be at least 1");
        }
        if self.batch_timeout == 0 {
            return invalid("batchTimeout must be at least 1 tick");
        }
        if self.flags.scan_window == 0 {
            return invalid("flags.scanWindow must be at least 1");
        }
        if self.flags.dm_workers == Some(0) {
            return invalid("flags.dmWorkers must be at least 1");
        }
        if self.strategy == OrderingStrategy::ConChainParallel && !self.dependency_manager() {
            return invalid("ConChainParallel requires the dependency manager");
        }
        if let OrderingStrategy::Grouping { priority } = &self.strategy {
            let mut seen = priority.clone();
            seen.sort();
            seen.dedup();
            if seen.len() != priority.len() || priority.is_empty() {
                return invalid("grouping priority must list distinct classes");
            }
        }
        let st = &self.service_times;
        for (name, s) in [
            ("endorse", st.endorse),
            ("analyze", st.analyze_time()),
            ("order", st.order),
            ("validate", st.validate),
        ] {
            if !(s.median.is_finite() && s.median > 0.0 && s.sigma.is_finite() && s.sigma >= 0.0) {
                return Err(ConfigError::Invalid(format!(
                    "serviceTimes.{name} needs a positive median and non-negative sigma"
                )));
            }
        }
        Ok(())
    }
}
