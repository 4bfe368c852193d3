//! Experiment configuration: one JSON document per run, with command-line
//! overrides applied on top, hashed for provenance.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use steerlab_core::generative::{GenTrainConfig, Paradigm};
use steerlab_core::shapeworld::DatasetConfig;
use steerlab_core::steer::GuidanceConfig;
use steerlab_core::teacher::TeacherTrainConfig;

use crate::error::{LabError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Alpha,
    GuidedSteps,
}

impl std::str::FromStr for SweepParam {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(SweepParam::Alpha),
            "guided_steps" | "guided-steps" => Ok(SweepParam::GuidedSteps),
            _ => Err(LabError::Config(format!("unknown sweep parameter `{s}`"))),
        }
    }
}

impl std::fmt::Display for SweepParam {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepParam::Alpha => "alpha",
            SweepParam::GuidedSteps => "guided_steps",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub parameter: SweepParam,
    pub values: Vec<f64>,
    pub seeds: usize,
    pub paradigm: Paradigm,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            parameter: SweepParam::Alpha,
            values: vec![0.0, 2.5, 5.0, 10.0],
            seeds: 5,
            paradigm: Paradigm::Ddim,
        }
    }
}

impl SweepSpec {
    pub fn validate(&self, steps: usize) -> Result<()> {
        if self.values.len() < 2 {
            return Err(LabError::Config(format!(
                "a sweep needs at least 2 values, got {}",
                self.values.len()
            )));
        }
        if self.seeds < 3 {
            return Err(LabError::Config(format!("a sweep needs at least 3 seeds, got {}", self.seeds)));
        }
        for &v in &self.values {
            let ok = match self.parameter {
                SweepParam::Alpha => v.is_finite() && v >= 0.0,
                SweepParam::GuidedSteps => v >= 0.0 && v.fract() == 0.0 && v as usize <= steps,
            };
            if !ok {
                return Err(LabError::Config(format!("{} value {v} out of range", self.parameter)));
            }
        }
        Ok(())
    }
}

/// What the generators' latents decode through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderMode {
    /// Latent space is pixel space.
    #[default]
    Identity,
    /// A tiny autoencoder trained on the dataset before the generators.
    Autoencoder,
}

/// Where the steering target comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TargetSpec {
    /// Per seed, the candidate shape render farthest from the unguided sample.
    Conflict,
    Image { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SteerSpec {
    pub paradigm: Paradigm,
    pub seeds: Vec<u64>,
    pub target: TargetSpec,
}

impl Default for SteerSpec {
    fn default() -> Self {
        Self {
            paradigm: Paradigm::Ddim,
            seeds: vec![0],
            target: TargetSpec::Conflict,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HealingSpec {
    pub seeds: usize,
    /// Early stop for the flow paradigm, as a fraction of sampler steps.
    pub flow_stop: f64,
    /// Early stop for the DDIM paradigm, as a fraction of sampler steps.
    pub ddim_stop: f64,
}

impl Default for HealingSpec {
    fn default() -> Self {
        Self {
            seeds: 10,
            flow_stop: 0.2,
            ddim_stop: 0.6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Global seed, copied into every component block by [`resolve`](Self::resolve).
    pub seed: u64,
    /// Output root; excluded from the config hash.
    pub out_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub decoder: DecoderMode,
    pub teacher: TeacherTrainConfig,
    pub generator: GenTrainConfig,
    pub guidance: GuidanceConfig,
    pub steer: SteerSpec,
    pub sweep: SweepSpec,
    pub healing: HealingSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            out_dir: PathBuf::from("runs/default"),
            dataset: DatasetConfig::default(),
            decoder: DecoderMode::Identity,
            teacher: TeacherTrainConfig::default(),
            generator: GenTrainConfig::default(),
            guidance: GuidanceConfig::default(),
            steer: SteerSpec::default(),
            sweep: SweepSpec::default(),
            healing: HealingSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| LabError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_slice(&bytes).map_err(|e| LabError::Config(format!("{}: {e}", path.display())))
    }

    /// Propagate the global seed and check every block.
    pub fn resolve(mut self) -> Result<Self> {
        self.dataset.seed = self.seed;
        self.teacher.seed = self.seed;
        self.generator.seed = self.seed;
        self.dataset.validate().map_err(LabError::io)?;
        self.teacher.validate().map_err(LabError::io)?;
        self.generator.validate().map_err(LabError::io)?;
        self.guidance.validate(self.generator.steps).map_err(LabError::io)?;
        if !(0.0..=1.0).contains(&self.healing.flow_stop) || !(0.0..=1.0).contains(&self.healing.ddim_stop) {
            return Err(LabError::Config("healing stop fractions must lie in [0, 1]".into()));
        }
        Ok(self)
    }

    /// SHA-256 over the canonical JSON form with `out_dir` cleared, so the
    /// same experiment in two directories hashes identically.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out_dir.join("data")
    }

    pub fn model_dir(&self) -> PathBuf {
        self.out_dir.join("models")
    }

    pub fn teacher_path(&self) -> PathBuf {
        self.model_dir().join("teacher.ckpt")
    }

    pub fn baseline_path(&self) -> PathBuf {
        self.model_dir().join("baseline.ckpt")
    }

    pub fn autoencoder_path(&self) -> PathBuf {
        self.model_dir().join("autoencoder.ckpt")
    }

    pub fn generator_path(&self, paradigm: Paradigm) -> PathBuf {
        self.model_dir().join(format!("{paradigm}.ckpt"))
    }
}
