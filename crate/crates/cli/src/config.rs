use std::path::Path;

use gvae::eval::FewShotProtocol;
use gvae::{AggregationMode, FactorSpec, ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::Failure;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Mode {
    Gvae,
    Mlvae,
    Vae,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_classes: usize,
    pub test_classes: usize,
    pub items_per_class: usize,
    pub spec: FactorSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_classes: 200,
            test_classes: 50,
            items_per_class: 16,
            spec: FactorSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    /// Fraction of the largest content std counted as effective.
    pub threshold: f64,
    /// How many effective dimensions get precision and perturbation profiles.
    pub top: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            threshold: 0.1,
            top: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderConfig {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
}

impl Default for RenderConfig {
    fn default() -> Self {
        let grid: Vec<f64> = (0..9).map(|k| -0.5 + 0.25 * k as f64).collect();
        RenderConfig {
            alphas: grid.clone(),
            betas: grid,
        }
    }
}

/// Everything a run needs. The top-level `seed` drives data generation,
/// training and the few-shot splits alike.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub protocol: FewShotProtocol,
    pub analysis: AnalysisConfig,
    pub render: RenderConfig,
}

pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<Mode>,
    pub threads: usize,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self, Failure> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Failure::config(format!("reading {}: {e}", p.display())))?;
                toml::from_str(&text)
                    .map_err(|e| Failure::config(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        cfg.resolve(overrides)?;
        Ok(cfg)
    }

    fn resolve(&mut self, overrides: &Overrides) -> Result<(), Failure> {
        if let Some(seed) = overrides.seed {
            self.seed = seed;
        }
        match overrides.mode {
            Some(Mode::Gvae) => self.model.aggregation = AggregationMode::Average,
            Some(Mode::Mlvae) => self.model.aggregation = AggregationMode::Product,
            Some(Mode::Vae) => self.model.aggregation = AggregationMode::None,
            None => {}
        }
        // an ungrouped model sees one image per group
        if self.model.aggregation == AggregationMode::None {
            self.model.group_size = 1;
        }
        self.train.seed = self.seed;
        self.protocol.seed = self.seed;
        self.protocol.threads = overrides.threads;
        self.validate()
    }

    pub fn validate(&self) -> Result<(), Failure> {
        self.data.spec.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.protocol.validate()?;
        if !(self.analysis.threshold >= 0.0 && self.analysis.threshold <= 1.0) {
            return Err(Failure::config("analysis.threshold must lie in [0, 1]"));
        }
        if self.render.alphas.is_empty() || self.render.betas.is_empty() {
            return Err(Failure::config(
                "render.alphas and render.betas must be non-empty",
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String, Failure> {
        toml::to_string(self).map_err(|e| Failure::config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn none() -> Overrides {
        Overrides {
            seed: None,
            mode: None,
            threads: 1,
        }
    }

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::load(None, &none()).unwrap();
        let text = cfg.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.model.group_size, 5);
        assert_eq!(cfg.train.epochs, 50);
    }

    #[test]
    fn vae_mode_forces_singleton_groups() {
        let mut cfg: RunConfig = toml::from_str("[model]\ngroup_size = 7\n").unwrap();
        cfg.resolve(&Overrides {
            mode: Some(Mode::Vae),
            ..none()
        })
        .unwrap();
        assert_eq!(cfg.model.group_size, 1);
        assert_eq!(cfg.model.aggregation, AggregationMode::None);
    }

    #[test]
    fn seed_override_reaches_every_stage() {
        let mut cfg: RunConfig = toml::from_str("seed = 3\n").unwrap();
        cfg.resolve(&Overrides {
            seed: Some(9),
            ..none()
        })
        .unwrap();
        assert_eq!((cfg.seed, cfg.train.seed, cfg.protocol.seed), (9, 9, 9));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("sed = 3\n").is_err());
        assert!(toml::from_str::<RunConfig>("[analysis]\ntop = 2\nbottom = 1\n").is_err());
    }
}
