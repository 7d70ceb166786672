use std::path::Path;

use anyhow::{Context, Result};
use pedcross::env::EnvConfig;
use pedcross::trainer::TrainConfig;
use pedcross::world::{RoadGeometry, Scenario, WorldConfig};
use serde::{Deserialize, Serialize};

/// Settings shared by every subcommand, read from a TOML file and then
/// overridden by command-line flags.
///
/// ```toml
/// seed = 7
/// workers = 4
///
/// [world.geometry]
/// walk_speed = 1.31
///
/// [train]
/// mode = "per-sigma"
/// max_episodes = 6000
/// sigma_grid = { start = 0.0, stop = 0.2, step = 0.05 }
///
/// [eval]
/// rollouts = 1000
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    pub world: WorldConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
    pub fit: FitSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            workers: 1,
            world: WorldConfig::default(),
            train: TrainConfig::default(),
            eval: EvalSettings::default(),
            fit: FitSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    /// Greedy rollouts per (model, σ_v, scenario) cell.
    pub rollouts: usize,
    /// Monte Carlo draws per estimated-TTA dispersion cell.
    pub dispersion_samples: usize,
    /// σ_v values at which a conditioned model is evaluated.
    pub sigmas: Vec<f64>,
    /// Scenario ids to evaluate; empty means the six experimental ones.
    pub scenarios: Vec<u32>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            rollouts: 1000,
            dispersion_samples: 10_000,
            sigmas: vec![0.0, 0.05, 0.1, 0.2],
            scenarios: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitSettings {
    /// Model rollouts per (σ_v, scenario) used for each density estimate.
    pub rollouts: usize,
}

impl Default for FitSettings {
    fn default() -> Self {
        FitSettings { rollouts: 1000 }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text)
            .map_err(|e| pedcross::Error::Config(format!("{}: {e}", path.display())))
            .map_err(Into::into)
    }

    pub fn validate(&self) -> pedcross::Result<()> {
        self.world.validate()?;
        self.train.validate()?;
        if self.workers == 0 {
            return Err(pedcross::Error::Config("workers must be at least 1".into()));
        }
        if self.eval.rollouts == 0 || self.fit.rollouts == 0 {
            return Err(pedcross::Error::Config("rollout counts must be positive".into()));
        }
        for &s in &self.eval.sigmas {
            if !(0.0..=1.0).contains(&s) {
                return Err(pedcross::Error::Config(format!("eval sigma {s} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn geometry(&self) -> RoadGeometry {
        self.world.geometry
    }

    pub fn env(&self) -> EnvConfig {
        self.train.env
    }

    pub fn eval_scenarios(&self) -> pedcross::Result<Vec<Scenario>> {
        if self.eval.scenarios.is_empty() {
            return Ok(self.world.scenarios.iter().filter(|s| !s.training_only).copied().collect());
        }
        self.eval
            .scenarios
            .iter()
            .map(|&id| self.world.scenario(id).copied().ok_or(pedcross::Error::MissingScenario(id)))
            .collect()
    }
}

/// Parses `0.05,0.1,0.2` or a `start:stop:step` grid.
pub fn parse_sigma_list(text: &str) -> pedcross::Result<Vec<f64>> {
    if text.contains(':') {
        return Ok(pedcross::trainer::SigmaGrid::parse(text)?.values());
    }
    text.split(',')
        .map(|p| {
            let v: f64 = p
                .trim()
                .parse()
                .map_err(|_| pedcross::Error::Config(format!("bad sigma value {p:?}")))?;
            if !(0.0..=1.0).contains(&v) {
                return Err(pedcross::Error::Config(format!("sigma {v} outside [0, 1]")));
            }
            Ok(v)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documented_example_parses() {
        let text = r#"
seed = 7
workers = 4

[world.geometry]
walk_speed = 1.31

[train]
mode = "per-sigma"
max_episodes = 6000
sigma_grid = { start = 0.0, stop = 0.2, step = 0.05 }

[eval]
rollouts = 1000
"#;
        let cfg: RunConfig = toml::from_str(text).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.train.sigma_grid.values().len(), 5);
        assert_eq!(cfg.world.scenarios.len(), 8);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("sed = 1").is_err());
        assert!(toml::from_str::<RunConfig>("[train]\ngama = 0.9").is_err());
    }

    #[test]
    fn sigma_lists() {
        assert_eq!(parse_sigma_list("0.05, 0.1").unwrap(), vec![0.05, 0.1]);
        assert_eq!(parse_sigma_list("0:0.1:0.05").unwrap(), vec![0.0, 0.05, 0.1]);
        assert!(parse_sigma_list("1.5").is_err());
        assert!(parse_sigma_list("x").is_err());
    }
}
