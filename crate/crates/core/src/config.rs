//! Training configuration, TOML loading and validation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::DEFAULT_THETA_FLOOR;
use crate::rollout::Execution;

/// How task updates inside one training step are ordered.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateMode {
    /// Tasks are rolled out and applied one at a time, ascending task id.
    #[default]
    Sequential,
    /// Every task is rolled out against the frozen pre-step policy and the
    /// summed gradient is applied once.
    Aggregated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub n_nodes: usize,
    pub out_degree: usize,
    pub n_tasks: usize,
    pub n_rollout: usize,
    pub l_max: usize,
    pub learning_rate: f64,
    pub total_steps: usize,
    pub eval_every: usize,
    pub eval_samples: usize,
    pub snapshot_every: usize,
    pub web_threshold: f64,
    pub master_seed: u64,
    pub theta_floor: f64,
    pub init_low: f64,
    pub init_high: f64,
    /// Divide the summed policy gradient by `n_rollout`.
    pub advantage_mean_divide: bool,
    pub update_mode: UpdateMode,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_nodes: 800,
            out_degree: 40,
            n_tasks: 128,
            n_rollout: 128,
            l_max: 20,
            learning_rate: 0.04,
            total_steps: 800,
            eval_every: 10,
            eval_samples: 64,
            snapshot_every: 50,
            web_threshold: 0.95,
            master_seed: 0,
            theta_floor: DEFAULT_THETA_FLOOR,
            init_low: 0.5,
            init_high: 1.5,
            advantage_mean_divide: false,
            update_mode: UpdateMode::Sequential,
            execution: Execution::Parallel,
        }
    }
}

impl TrainConfig {
    /// Checks ranges. Returns advisory warnings for settings that are legal
    /// but outside the multi-task regime `1 << n_tasks << n_nodes`.
    pub fn validate(&self) -> Result<Vec<String>> {
        let positive = [
            ("n_nodes", self.n_nodes),
            ("out_degree", self.out_degree),
            ("n_tasks", self.n_tasks),
            ("n_rollout", self.n_rollout),
            ("l_max", self.l_max),
            ("eval_every", self.eval_every),
            ("eval_samples", self.eval_samples),
            ("snapshot_every", self.snapshot_every),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.out_degree >= self.n_nodes {
            return Err(Error::config("out_degree", "must be smaller than n_nodes"));
        }
        if self.n_tasks > self.n_nodes * (self.n_nodes - 1) {
            return Err(Error::config("n_tasks", "exceeds the number of distinct node pairs"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be a positive finite number"));
        }
        if !(self.web_threshold > 0.0 && self.web_threshold < 1.0) {
            return Err(Error::config("web_threshold", "must lie in (0, 1)"));
        }
        if !(self.init_low > 0.0 && self.init_low <= self.init_high && self.init_high.is_finite()) {
            return Err(Error::config("init_low", "init bounds must satisfy 0 < init_low <= init_high"));
        }
        if !(self.theta_floor > 0.0 && self.theta_floor <= self.init_low) {
            return Err(Error::config("theta_floor", "must lie in (0, init_low]"));
        }
        let mut warnings = Vec::new();
        if self.n_tasks < 10 || self.n_tasks * 5 > self.n_nodes {
            warnings.push(format!(
                "n_tasks={} with n_nodes={} is outside the 1 << n_tasks << n_nodes regime; \
                 two-stage dynamics may not emerge",
                self.n_tasks, self.n_nodes
            ));
        }
        Ok(warnings)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let message = e.message().to_string();
            let field = message
                .split('`')
                .nth(1)
                .unwrap_or("<file>")
                .to_string();
            Error::config(field, message)
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Reads, fills defaults, validates, and logs any regime warnings.
    pub fn load(path: &Path) -> Result<(Self, Vec<String>)> {
        let text = std::fs::read_to_string(path)?;
        let cfg = Self::from_toml_str(&text)?;
        let warnings = cfg.validate()?;
        for w in &warnings {
            log::warn!("{w}");
        }
        Ok((cfg, warnings))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = TrainConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, TrainConfig::default());
        assert_eq!(
            (cfg.n_nodes, cfg.out_degree, cfg.n_tasks, cfg.n_rollout, cfg.l_max),
            (800, 40, 128, 128, 20)
        );
        assert_eq!(cfg.learning_rate, 0.04);
        assert_eq!(cfg.web_threshold, 0.95);
        assert!(cfg.validate().unwrap().is_empty());
    }

    #[test]
    fn negative_learning_rate_rejected() {
        let cfg = TrainConfig::from_toml_str("learning_rate = -1.0").unwrap();
        match cfg.validate() {
            Err(Error::Config { field, .. }) => assert_eq!(field, "learning_rate"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn crowded_task_set_warns() {
        let cfg = TrainConfig::from_toml_str("n_tasks = 700\nn_nodes = 800").unwrap();
        let warnings = cfg.validate().unwrap();
        assert_eq!(warnings.len(), 1);
    }

    #[test]
    fn unknown_and_malformed_keys_rejected() {
        match TrainConfig::from_toml_str("n_nodez = 5") {
            Err(Error::Config { field, .. }) => assert_eq!(field, "n_nodez"),
            other => panic!("expected config error, got {other:?}"),
        }
        assert!(TrainConfig::from_toml_str("n_nodes = \"many\"").is_err());
        assert!(TrainConfig::from_toml_str("n_nodes = ").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = TrainConfig {
            master_seed: 99,
            update_mode: UpdateMode::Aggregated,
            ..TrainConfig::default()
        };
        assert_eq!(TrainConfig::from_toml_str(&cfg.to_toml_string()).unwrap(), cfg);
    }
}
