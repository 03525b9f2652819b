//! Experiment configuration, dataset construction, the training loop and the
//! evaluation harness.

mod dataset;
mod eval;
mod fit;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infer::{CostWeights, GridConfig, PerceptionConfig};
use crate::metrics::MetricConfig;
use crate::model::{AdamConfig, HeadLayout, ModelConfig};
use crate::vocab::{KMeansConfig, KinematicConfig};
use crate::pipeline::StageKind;
use crate::world::{NoiseConfig, WorldConfig};

pub use dataset::{
    build_dataset, load_dataset, save_dataset, scenario_seed, Dataset, DatasetManifest, Split, SplitData,
};
pub use eval::{evaluate, read_report, write_report, EvalReport, EvalSummary, InferenceMode, ScenarioRecord};
pub use fit::{fit, validation_pdm, CurveRow, FitResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train: 800,
            val: 100,
            test: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabConfig {
    /// Trajectories sampled before clustering.
    pub n_samples: usize,
    pub sample_seed: u64,
    pub kinematics: KinematicConfig,
    pub kmeans: KMeansConfig,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self {
            n_samples: 20_000,
            sample_seed: 0,
            kinematics: KinematicConfig::default(),
            kmeans: KMeansConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub adam: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight of the distillation term.
    pub lambda_kd: f64,
    /// Imitation-target temperature; the median pairwise vocabulary distance when unset.
    pub sigma: Option<f64>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            adam: AdamConfig {
                lr: 1e-3,
                ..AdamConfig::default()
            },
            epochs: 25,
            batch_size: 32,
            lambda_kd: 100.0,
            sigma: Some(10.0),
        }
    }
}

/// Which teacher targets a student is trained against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Distillation {
    /// Imitation only.
    None,
    MultiTarget,
    PdmOnly,
}

impl Distillation {
    pub fn heads(self) -> HeadLayout {
        match self {
            Distillation::PdmOnly => HeadLayout::PdmOnly,
            _ => HeadLayout::MultiTarget,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Distillation::None => "none",
            Distillation::MultiTarget => "multi-target",
            Distillation::PdmOnly => "pdm-only",
        }
    }

    /// Selection rule used for validation during training.
    pub fn validation_mode(self) -> InferenceMode {
        match self {
            Distillation::None => InferenceMode::ArgmaxImitation,
            _ => InferenceMode::AssembledCost,
        }
    }
}

impl std::str::FromStr for Distillation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Distillation::None, Distillation::MultiTarget, Distillation::PdmOnly]
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::config(format!("unknown distillation `{s}` (none, multi-target, pdm-only)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub default_weights: CostWeights,
    pub grid: GridConfig,
    pub perception: PerceptionConfig,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            default_weights: CostWeights::default(),
            grid: GridConfig::default(),
            perception: PerceptionConfig::default(),
        }
    }
}

/// Every knob of one experiment. A run is fully determined by this value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seeds the scenario splits and observation noise.
    pub data_seed: u64,
    /// One student per seed and variant; the seeds also drive shuffling.
    pub model_seeds: Vec<u64>,
    /// Student variants to train.
    pub distillation: Vec<Distillation>,
    pub splits: SplitConfig,
    pub vocab: VocabConfig,
    pub world: WorldConfig,
    pub noise: NoiseConfig,
    pub metrics: MetricConfig,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub inference: InferenceConfig,
    /// Last pipeline stage to run.
    pub through: StageKind,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data_seed: 0,
            model_seeds: vec![0, 1, 2],
            distillation: vec![Distillation::None, Distillation::MultiTarget, Distillation::PdmOnly],
            splits: SplitConfig::default(),
            vocab: VocabConfig::default(),
            world: WorldConfig::default(),
            noise: NoiseConfig::default(),
            metrics: MetricConfig::default(),
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            inference: InferenceConfig::default(),
            through: StageKind::Report,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = crate::util::read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|e| Error::format(path, e.to_string()))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.noise.validate()?;
        self.metrics.validate()?;
        self.vocab.kinematics.validate()?;
        self.model.validate()?;
        self.inference.grid.validate()?;
        self.inference.default_weights.validate()?;
        let kin = &self.vocab.kinematics;
        if kin.horizon_steps != self.world.horizon_steps || (kin.dt - self.world.dt).abs() > 1e-12 {
            return Err(Error::config("vocabulary and world disagree on horizon or dt"));
        }
        if self.model.horizon_steps != self.world.horizon_steps || self.model.grid_size != self.noise.grid_size {
            return Err(Error::config("model horizon / grid size must match world and noise settings"));
        }
        let s = &self.splits;
        if s.train == 0 || s.val == 0 || s.test == 0 {
            return Err(Error::config("every split needs at least one scenario"));
        }
        if [s.train, s.val, s.test].iter().any(|n| *n as u64 >= dataset::SPLIT_STRIDE) {
            return Err(Error::config("split sizes exceed the per-split seed range"));
        }
        if self.vocab.kmeans.k == 0 || self.vocab.n_samples < self.vocab.kmeans.k {
            return Err(Error::config("need at least k sampled trajectories"));
        }
        if self.optim.epochs == 0 || self.optim.batch_size == 0 {
            return Err(Error::config("epochs and batch size must be positive"));
        }
        if !(self.optim.lambda_kd >= 0.0) || !(self.optim.adam.lr > 0.0) {
            return Err(Error::config("lambda_kd must be >= 0 and lr > 0"));
        }
        if let Some(sigma) = self.optim.sigma {
            if !(sigma > 0.0 && sigma.is_finite()) {
                return Err(Error::config("sigma must be finite and > 0"));
            }
        }
        if self.model_seeds.is_empty() {
            return Err(Error::config("need at least one model seed"));
        }
        Ok(())
    }

    pub fn model_config(&self, distillation: Distillation) -> ModelConfig {
        ModelConfig {
            heads: distillation.heads(),
            ..self.model.clone()
        }
    }

    pub fn lambda_kd(&self, distillation: Distillation) -> f64 {
        match distillation {
            Distillation::None => 0.0,
            _ => self.optim.lambda_kd,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg = ExperimentConfig::from_toml("data_seed = 7\n[splits]\ntrain = 10\n").unwrap();
        assert_eq!(cfg.data_seed, 7);
        assert_eq!(cfg.splits.train, 10);
        assert_eq!(cfg.splits.test, 200);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml("bogus = 1\n").is_err());
        assert!(ExperimentConfig::from_toml("[optim]\nlr = 1.0\n").is_err());
    }

    #[test]
    fn mismatched_horizons_are_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.model.horizon_steps = 20;
        assert!(cfg.validate().is_err());
    }
}
