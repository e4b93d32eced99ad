use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::explorer::{ExplorationConfig, Strategy};
use crate::model::ModelConfig;
use crate::planner::PlannerConfig;
use crate::symbols::DistillConfig;
use crate::world::WorldConfig;

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_ENV: &str = "CURIOSYM_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Rows in the held-out test set.
    pub test_set_size: usize,
    /// Draws allowed per retained row before generation gives up.
    pub attempts_per_row: usize,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        Self {
            test_set_size: 2400,
            attempts_per_row: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub strategies: Vec<Strategy>,
    pub output_dir: PathBuf,
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub exploration: ExplorationConfig,
    pub symbols: DistillConfig,
    pub planner: PlannerConfig,
    pub evaluation: EvaluationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            strategies: Strategy::ALL.to_vec(),
            output_dir: PathBuf::from("runs"),
            world: WorldConfig::default(),
            model: ModelConfig::default(),
            exploration: ExplorationConfig::default(),
            symbols: DistillConfig::default(),
            planner: PlannerConfig::default(),
            evaluation: EvaluationConfig::default(),
        }
    }
}

#[derive(Serialize)]
struct HashedBlocks<'a> {
    world: &'a WorldConfig,
    model: &'a ModelConfig,
    exploration: &'a ExplorationConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.strategies.is_empty() {
            return Err(Error::Config("at least one strategy is required".into()));
        }
        self.world.validate()?;
        self.model.validate()?;
        self.exploration.validate()?;
        self.symbols.validate()?;
        self.planner.validate()?;
        if self.evaluation.test_set_size == 0 {
            return Err(Error::Config("evaluation.test_set_size must be >= 1".into()));
        }
        Ok(())
    }

    /// Exploration settings for one strategy.
    pub fn exploration_for(&self, strategy: Strategy) -> ExplorationConfig {
        ExplorationConfig {
            strategy,
            ..self.exploration.clone()
        }
    }

    /// SHA-256 over the world, model and exploration blocks (with the given
    /// strategy). Embedded in every dataset, checkpoint and library.
    pub fn config_hash(&self, strategy: Strategy) -> String {
        let exploration = self.exploration_for(strategy);
        let blocks = HashedBlocks {
            world: &self.world,
            model: &self.model,
            exploration: &exploration,
        };
        let json = serde_json::to_vec(&blocks).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    /// Output root: the explicit override, then `$CURIOSYM_OUT`, then
    /// `output_dir`.
    pub fn output_root(&self, cli: Option<&Path>) -> PathBuf {
        if let Some(p) = cli {
            return p.to_path_buf();
        }
        match std::env::var_os(OUTPUT_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output_dir.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), cfg);
    }

    #[test]
    fn partial_blocks_and_errors() {
        let cfg = ExperimentConfig::from_toml("seeds = [7]\n[model]\nhidden_width = 64\n[model.train]\noptimizer = \"adam\"\n").unwrap();
        assert_eq!(cfg.seeds, vec![7]);
        assert_eq!(cfg.model.hidden_width, 64);
        assert_eq!(cfg.model.hidden_layers, 4);
        assert!(matches!(ExperimentConfig::from_toml("[model]\nwidth = 3\n"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml("seeds = []\n"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml("[model]\ntemperature = 0.0\n"), Err(Error::Config(_))));
        assert!(matches!(ExperimentConfig::from_toml("not toml ="), Err(Error::Config(_))));
    }

    #[test]
    fn hash_tracks_relevant_blocks() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.planner.threshold = 0.1;
        b.seeds = vec![9];
        assert_eq!(a.config_hash(Strategy::Random), b.config_hash(Strategy::Random));
        assert_ne!(a.config_hash(Strategy::Random), a.config_hash(Strategy::Curiosity));
        b.world.noise_sigma = 0.001;
        assert_ne!(a.config_hash(Strategy::Random), b.config_hash(Strategy::Random));
        assert_eq!(a.config_hash(Strategy::Active).len(), 64);
    }
}
