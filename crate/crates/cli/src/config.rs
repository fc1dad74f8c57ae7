//! Run configuration. Every key except `seed` has a default; unknown keys
//! are rejected.

use std::fs;
use std::path::Path;

use occlinker_core::training::TrainConfig;
use occlinker_core::{BaseConfig, PluginConfig, SceneSpec};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub world: WorldConfig,
    #[serde(default)]
    pub base: BaseConfig,
    #[serde(default)]
    pub plugin: PluginConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub train_episodes: usize,
    pub heldout_episodes: usize,
    /// Scene template; its `seed` is replaced per episode.
    pub scene: SceneSpec,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            train_episodes: 32,
            heldout_episodes: 4,
            scene: SceneSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Variants run by `ablate` when none are given on the command line.
    pub variants: Vec<String>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            variants: [
                "M0", "M1", "M2", "M3", "M4", "M4-swap", "L0", "L1", "L2", "L3", "early", "late", "lambda=0",
                "lambda=0.01", "lambda=0.1", "lambda=1",
            ]
            .map(String::from)
            .to_vec(),
        }
    }
}

impl RunConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            world: WorldConfig::default(),
            base: BaseConfig::default(),
            plugin: PluginConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn parse(text: &str) -> std::result::Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    /// Seeds of the training and held-out episodes. Run seed 0 uses
    /// 1000.. and 5000..; every other seed shifts both by a million.
    pub fn episode_seeds(&self) -> (Vec<u64>, Vec<u64>) {
        let off = self.seed.wrapping_mul(1_000_000);
        let train = (0..self.world.train_episodes as u64).map(|i| off.wrapping_add(1000 + i)).collect();
        let held = (0..self.world.heldout_episodes as u64).map(|i| off.wrapping_add(5000 + i)).collect();
        (train, held)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_is_mandatory_and_unknown_keys_fail() {
        assert!(RunConfig::parse("").is_err());
        let c = RunConfig::parse("seed = 4").unwrap();
        assert_eq!(c, RunConfig::with_seed(4));
        assert!(RunConfig::parse("seed = 1\n[plugin]\nwindow = 2\n").is_err());
        assert!(RunConfig::parse("seed = 1\nbogus = 2\n").is_err());
        let c = RunConfig::parse("seed = 1\n[plugin]\nL = 2\n[world.scene]\nkeyframes = 5\n").unwrap();
        assert_eq!((c.plugin.window, c.world.scene.keyframes), (2, 5));
    }

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::with_seed(9);
        c.train.lambda = 0.5;
        c.world.scene.keyframes = 7;
        assert_eq!(RunConfig::parse(&c.to_toml()).unwrap(), c);
    }
}
