//! Run configuration: every training, policy, and simulator knob in one flat
//! `key = value` text file. Blank lines and `#` comments are ignored.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::embeddings::OptimizerConfig;
use crate::error::ConfigError;
use crate::facttree::TreeConfig;
use crate::policy::PolicyConfig;
use crate::simulator::SimulatorMode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub num_trees: usize,
    /// Attributes sampled per tree; `None` means ⌈0.8·p⌉.
    pub f_max: Option<usize>,
    pub dim: usize,
    /// Keep item embeddings trainable for every tree (built sequentially)
    /// instead of freezing them after the first tree.
    pub joint_refinement: bool,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            num_trees: 10,
            f_max: None,
            dim: 40,
            joint_refinement: false,
        }
    }
}

impl ForestConfig {
    pub fn resolved_f_max(&self, p: usize) -> usize {
        self.f_max
            .unwrap_or_else(|| (p * 4).div_ceil(5))
            .clamp(1, p.max(1))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub forest: ForestConfig,
    pub optimizer: OptimizerConfig,
    pub tree: TreeConfig,
    pub policy: PolicyConfig,
    pub simulator_mode: SimulatorMode,
    pub rho: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            forest: ForestConfig::default(),
            optimizer: OptimizerConfig {
                seed: 42,
                ..OptimizerConfig::default()
            },
            tree: TreeConfig::default(),
            policy: PolicyConfig::default(),
            simulator_mode: SimulatorMode::Recorded,
            rho: 0.5,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| ConfigError::InvalidValue {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn invalid(key: &str, value: &str, reason: &str) -> ConfigError {
    ConfigError::InvalidValue {
        key: key.into(),
        value: value.into(),
        reason: reason.into(),
    }
}

fn non_negative(key: &str, value: &str) -> Result<f64, ConfigError> {
    let v: f64 = parse(key, value)?;
    if !v.is_finite() || v < 0.0 {
        return Err(invalid(key, value, "must be a finite non-negative number"));
    }
    Ok(v)
}

fn positive_count(key: &str, value: &str) -> Result<usize, ConfigError> {
    let v: usize = parse(key, value)?;
    if v == 0 {
        return Err(invalid(key, value, "must be at least 1"));
    }
    Ok(v)
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "num_trees",
        "f_max",
        "dim",
        "joint_refinement",
        "learning_rate",
        "epochs_search",
        "epochs_commit",
        "negatives",
        "lambda_bpr",
        "lambda_s",
        "lambda_v",
        "init_scale",
        "max_depth",
        "gamma",
        "min_node",
        "top_k",
        "max_turns",
        "eta",
        "alpha_p",
        "alpha_n",
        "exclude_rejected",
        "simulator_mode",
        "rho",
    ];

    /// Set one key from its text form, validating type and range.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let value = value.trim();
        match key {
            "seed" => {
                self.seed = parse(key, value)?;
                self.optimizer.seed = self.seed;
            }
            "num_trees" => self.forest.num_trees = positive_count(key, value)?,
            "f_max" => {
                self.forest.f_max = match value {
                    "auto" => None,
                    v => Some(positive_count(key, v)?),
                }
            }
            "dim" => self.forest.dim = positive_count(key, value)?,
            "joint_refinement" => self.forest.joint_refinement = parse(key, value)?,
            "learning_rate" => {
                let v = non_negative(key, value)?;
                if v == 0.0 {
                    return Err(invalid(key, value, "must be positive"));
                }
                self.optimizer.learning_rate = v;
            }
            "epochs_search" => self.optimizer.epochs_search = positive_count(key, value)?,
            "epochs_commit" => self.optimizer.epochs_commit = positive_count(key, value)?,
            "negatives" => self.optimizer.negatives_per_positive = positive_count(key, value)?,
            "lambda_bpr" => self.optimizer.lambda_bpr = non_negative(key, value)?,
            "lambda_s" => self.optimizer.lambda_s = non_negative(key, value)?,
            "lambda_v" => self.optimizer.lambda_v = non_negative(key, value)?,
            "init_scale" => self.optimizer.init_scale = non_negative(key, value)?,
            "max_depth" => self.tree.max_depth = parse(key, value)?,
            "gamma" => self.tree.gamma = non_negative(key, value)?,
            "min_node" => self.tree.min_node = parse(key, value)?,
            "top_k" => self.policy.k = positive_count(key, value)?,
            "max_turns" => self.policy.max_turns = positive_count(key, value)?,
            "eta" => self.policy.eta = parse(key, value)?,
            "alpha_p" => self.policy.alpha_p = non_negative(key, value)?,
            "alpha_n" => self.policy.alpha_n = non_negative(key, value)?,
            "exclude_rejected" => self.policy.exclude_rejected = parse(key, value)?,
            "simulator_mode" => {
                self.simulator_mode = match value {
                    "recorded" => SimulatorMode::Recorded,
                    "sampled" => SimulatorMode::Sampled,
                    _ => return Err(invalid(key, value, "expected `recorded` or `sampled`")),
                }
            }
            "rho" => {
                let v = non_negative(key, value)?;
                if v > 1.0 {
                    return Err(invalid(key, value, "must be in [0, 1]"));
                }
                self.rho = v;
            }
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Apply a `key=value` override.
    pub fn apply_override(&mut self, assignment: &str) -> Result<(), ConfigError> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or(ConfigError::Syntax { line: 0 })?;
        self.set(k.trim(), v)
    }

    /// Parse a config file on top of the defaults.
    pub fn parse_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Apply the keys present in a config file to `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or(ConfigError::Syntax { line: i + 1 })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Render every key in canonical order; `parse_text` inverts this exactly.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let f_max = self
            .forest
            .f_max
            .map_or_else(|| "auto".to_string(), |v| v.to_string());
        let mode = match self.simulator_mode {
            SimulatorMode::Recorded => "recorded",
            SimulatorMode::Sampled => "sampled",
        };
        let rows: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("num_trees", self.forest.num_trees.to_string()),
            ("f_max", f_max),
            ("dim", self.forest.dim.to_string()),
            ("joint_refinement", self.forest.joint_refinement.to_string()),
            ("learning_rate", self.optimizer.learning_rate.to_string()),
            ("epochs_search", self.optimizer.epochs_search.to_string()),
            ("epochs_commit", self.optimizer.epochs_commit.to_string()),
            ("negatives", self.optimizer.negatives_per_positive.to_string()),
            ("lambda_bpr", self.optimizer.lambda_bpr.to_string()),
            ("lambda_s", self.optimizer.lambda_s.to_string()),
            ("lambda_v", self.optimizer.lambda_v.to_string()),
            ("init_scale", self.optimizer.init_scale.to_string()),
            ("max_depth", self.tree.max_depth.to_string()),
            ("gamma", self.tree.gamma.to_string()),
            ("min_node", self.tree.min_node.to_string()),
            ("top_k", self.policy.k.to_string()),
            ("max_turns", self.policy.max_turns.to_string()),
            ("eta", self.policy.eta.to_string()),
            ("alpha_p", self.policy.alpha_p.to_string()),
            ("alpha_n", self.policy.alpha_n.to_string()),
            ("exclude_rejected", self.policy.exclude_rejected.to_string()),
            ("simulator_mode", mode.to_string()),
            ("rho", self.rho.to_string()),
        ];
        debug_assert_eq!(rows.len(), Self::KEYS.len());
        for (k, v) in rows {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_reported_settings() {
        let c = RunConfig::default();
        assert_eq!(c.forest.dim, 40);
        assert_eq!(c.optimizer.lambda_bpr, 1e-3);
        assert_eq!(c.policy.alpha_p, 1e-3);
        assert_eq!(c.policy.alpha_n, 1e-2);
        assert_eq!(c.tree.gamma, 0.996);
        assert_eq!(c.tree.max_depth, 7);
        assert_eq!((c.policy.k, c.policy.max_turns, c.policy.eta), (10, 10, 10));
        assert_eq!(c.forest.resolved_f_max(33), 27);
        assert_eq!(c.forest.resolved_f_max(8), 7);
    }

    #[test]
    fn text_roundtrip() {
        let mut c = RunConfig::default();
        c.set("lambda_s", "0.125").unwrap();
        c.set("f_max", "4").unwrap();
        c.set("simulator_mode", "sampled").unwrap();
        let text = c.to_text();
        assert_eq!(RunConfig::parse_text(&text).unwrap(), c);
        assert_eq!(text.lines().count(), RunConfig::KEYS.len());
        for (line, key) in text.lines().zip(RunConfig::KEYS) {
            assert!(line.starts_with(key));
        }
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert_eq!(
            RunConfig::parse_text("bogus = 1"),
            Err(ConfigError::UnknownKey("bogus".into()))
        );
        assert!(matches!(
            RunConfig::parse_text("gamma = -1"),
            Err(ConfigError::InvalidValue { .. })
        ));
        assert!(matches!(
            RunConfig::parse_text("num_trees = 0"),
            Err(ConfigError::InvalidValue { .. })
        ));
        assert_eq!(
            RunConfig::parse_text("\n# comment\nseed 4"),
            Err(ConfigError::Syntax { line: 3 })
        );
        let c = RunConfig::parse_text("seed = 9 # trailing\n").unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.optimizer.seed, 9);
    }
}
