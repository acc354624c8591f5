//! Run configuration: one TOML-serializable struct covering the dataset,
//! model geometry, episodic protocol, augmentation, loss weights, grouping
//! and optimizer settings. Every run directory stores the fully resolved
//! config so results can be reproduced from it alone.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::sampler::AugmentConfig;
use crate::{Error, Result};

/// Which embedding feeds the prototype assignments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrototypeSpace {
    Penultimate,
    Logit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimAlgorithm {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Dataset container directory (manifest.json + data.bin + labels.bin).
    pub path: PathBuf,
    /// Class ids visible during training.
    pub known: Vec<u16>,
    /// Class ids held out as unknown (used only to build evaluation truth).
    pub unknown: Vec<u16>,
    /// Per-class fraction of labeled pixels held out for evaluation.
    pub test_fraction: f64,
    pub impute_nan: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            path: PathBuf::new(),
            known: Vec::new(),
            unknown: Vec::new(),
            test_fraction: 0.5,
            impute_nan: true,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Spatial patch size P (odd).
    pub patch: usize,
    /// Bands after the spectral reduction conv.
    pub reduced_bands: usize,
    pub block_channels: [usize; 2],
    pub final_channels: usize,
    /// Anchor scale φ.
    pub phi: f64,
    /// Distance penalty weight γ in the class-anchor loss.
    pub gamma: f64,
    /// Assignment softmax temperature τ.
    pub tau: f64,
    pub prototype_space: PrototypeSpace,
    /// Prototype count w.
    pub n_prototypes: usize,
    /// Working guess for how many unknown classes exist; only used to
    /// validate that w leaves discovery headroom.
    pub expected_unknown: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            patch: 9,
            reduced_bands: 100,
            block_channels: [8, 16],
            final_channels: 32,
            phi: 10.0,
            gamma: 0.8,
            tau: 0.1,
            prototype_space: PrototypeSpace::Penultimate,
            n_prototypes: 35,
            expected_unknown: 3,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct EpisodeConfig {
    /// Support shots per known class (k).
    pub shots: usize,
    /// Queries per class (d); 0 means the 3·k default.
    pub queries: usize,
    pub episodes: usize,
    pub pretrain_epochs: usize,
    /// Noisy replicas per support pixel in the pre-training pool.
    pub pretrain_copies: usize,
    /// Evaluation cadence in episodes; 0 evaluates only at the end.
    pub eval_every: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        EpisodeConfig {
            shots: 5,
            queries: 0,
            episodes: 2000,
            pretrain_epochs: 50,
            pretrain_copies: 10,
            eval_every: 100,
        }
    }
}

/// Per-term loss weights; all 1.0 reproduces the plain-sum objective.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub osc: f64,
    pub ca: f64,
    pub ps: f64,
    pub pgs: f64,
    pub reg: f64,
    pub kcd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            osc: 1.0,
            ca: 1.0,
            ps: 1.0,
            pgs: 1.0,
            reg: 1.0,
            kcd: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct GroupingConfig {
    /// Association set size (top-k prototypes per sample).
    pub top_k: usize,
    /// Louvain resolution.
    pub resolution: f64,
    /// Regroup cadence in episodes (1 = every episode).
    pub regroup_every_n: usize,
}

impl Default for GroupingConfig {
    fn default() -> Self {
        GroupingConfig {
            top_k: 3,
            resolution: 1.0,
            regroup_every_n: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub algorithm: OptimAlgorithm,
    pub lr: f64,
    /// SGD momentum (ignored by Adam).
    pub momentum: f64,
    /// Cosine-decay the step size to zero over the episode budget.
    pub cosine_decay: bool,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            algorithm: OptimAlgorithm::Sgd,
            lr: 1e-3,
            momentum: 0.9,
            cosine_decay: true,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub episode: EpisodeConfig,
    pub augment: AugmentConfig,
    pub loss: LossWeights,
    pub grouping: GroupingConfig,
    pub optim: OptimConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::InvalidConfig(format!("serialize config: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// d = 3k unless overridden.
    pub fn queries(&self) -> usize {
        if self.episode.queries == 0 {
            3 * self.episode.shots
        } else {
            self.episode.queries
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.patch < 3 || m.patch % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "patch size must be odd and ≥ 3, got {}",
                m.patch
            )));
        }
        if !(m.phi > 0.0) || !(m.tau > 0.0) || m.gamma < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "need φ > 0, τ > 0, γ ≥ 0; got φ={}, τ={}, γ={}",
                m.phi, m.tau, m.gamma
            )));
        }
        let expected = self.data.known.len() + m.expected_unknown;
        let floor = (1.5 * expected as f64).ceil() as usize;
        if m.n_prototypes < floor {
            return Err(Error::InvalidConfig(format!(
                "w = {} prototypes is too few for {} known + {} expected unknown classes \
                 (need ≥ 1.5× = {})",
                m.n_prototypes,
                self.data.known.len(),
                m.expected_unknown,
                floor
            )));
        }
        if self.episode.shots == 0 {
            return Err(Error::InvalidConfig("shots must be ≥ 1".into()));
        }
        if !(self.data.test_fraction > 0.0 && self.data.test_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "test fraction must lie in (0, 1), got {}",
                self.data.test_fraction
            )));
        }
        if !(self.optim.lr > 0.0) {
            return Err(Error::InvalidConfig(format!("step size must be positive, got {}", self.optim.lr)));
        }
        if !(0.0..1.0).contains(&self.optim.momentum) {
            return Err(Error::InvalidConfig(format!(
                "momentum must lie in [0, 1), got {}",
                self.optim.momentum
            )));
        }
        if self.grouping.top_k == 0 || self.grouping.regroup_every_n == 0 {
            return Err(Error::InvalidConfig(
                "top_k and regroup_every_n must be ≥ 1".into(),
            ));
        }
        if !(self.grouping.resolution > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "Louvain resolution must be positive, got {}",
                self.grouping.resolution
            )));
        }
        let a = &self.augment;
        if a.crop_min > a.crop_max || a.crop_max > m.patch || a.crop_min == 0 {
            return Err(Error::InvalidConfig(format!(
                "crop range [{}, {}] incompatible with patch {}",
                a.crop_min, a.crop_max, m.patch
            )));
        }
        if a.jitter_lo > a.jitter_hi || a.jitter_lo <= 0.0 {
            return Err(Error::InvalidConfig(format!(
                "jitter range [{}, {}] invalid",
                a.jitter_lo, a.jitter_hi
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn valid() -> RunConfig {
        let mut c = RunConfig::default();
        c.data.known = vec![1, 2, 3, 4, 5];
        c.data.unknown = vec![6, 7, 8];
        c
    }

    #[test]
    fn defaults_are_valid_and_match_published_values() {
        let c = valid();
        c.validate().unwrap();
        assert_eq!(c.model.phi, 10.0);
        assert_eq!(c.model.gamma, 0.8);
        assert_eq!(c.model.tau, 0.1);
        assert_eq!(c.queries(), 15); // d = 3k with k = 5
        assert_eq!(c.episode.episodes, 2000);
        assert_eq!(c.episode.pretrain_epochs, 50);
        assert_eq!(c.episode.eval_every, 100);
        assert_eq!(c.optim.lr, 1e-3);
        assert_eq!(c.grouping.top_k, 3);
    }

    #[test]
    fn toml_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        let mut c = valid();
        c.seed = 42;
        c.model.n_prototypes = 20;
        c.episode.queries = 7;
        c.save(&path).unwrap();
        let back = RunConfig::load(&path).unwrap();
        assert_eq!(toml::to_string(&c).unwrap(), toml::to_string(&back).unwrap());
        assert_eq!(back.queries(), 7);
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "seed = 3\n[model]\nn_prototypes = 16\n[data]\nknown = [1, 2]\nunknown = [3]\n",
        )
        .unwrap();
        let c = RunConfig::load(&path).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.model.n_prototypes, 16);
        assert_eq!(c.model.phi, 10.0);
        assert_eq!(c.episode.shots, 5);
        c.validate().unwrap();
    }

    #[test]
    fn prototype_headroom_is_enforced() {
        let mut c = valid();
        // 5 known + 3 expected unknown → floor = 12.
        c.model.n_prototypes = 11;
        assert!(c.validate().is_err());
        c.model.n_prototypes = 12;
        c.validate().unwrap();
    }

    #[test]
    fn bad_values_are_rejected() {
        let mut c = valid();
        c.model.patch = 8;
        assert!(c.validate().is_err());

        let mut c = valid();
        c.model.tau = 0.0;
        assert!(c.validate().is_err());

        let mut c = valid();
        c.data.test_fraction = 1.0;
        assert!(c.validate().is_err());

        let mut c = valid();
        c.optim.momentum = 1.0;
        assert!(c.validate().is_err());

        let mut c = valid();
        c.augment.crop_max = 11; // exceeds patch 9
        assert!(c.validate().is_err());

        let mut c = valid();
        c.episode.shots = 0;
        assert!(c.validate().is_err());
    }
}
