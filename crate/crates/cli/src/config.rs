//! The single JSON file that drives every command.

use std::fs;
use std::path::Path;

use ens_core::distill::DistillConfig;
use ens_core::search::EnsConfig;
use ens_core::tasks::{TaskConfig, TrainSchedule};
use ens_core::unet::ModelConfig;
use ens_core::EnsError;
use ens_tensor::mix_seed;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    /// Root seed; every stage of the pipeline derives its own stream.
    pub seed: u64,
    pub task: TaskConfig,
    pub model: ModelConfig,
    pub teacher: TrainSchedule,
    pub distill: DistillConfig,
    pub search: EnsConfig,
    pub finetune: TrainSchedule,
    pub erf: ErfConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ErfConfig {
    pub probes: usize,
}

impl Default for ErfConfig {
    fn default() -> Self {
        ErfConfig { probes: 16 }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            seed: 0,
            task: TaskConfig::default(),
            model: ModelConfig::default(),
            teacher: TrainSchedule::default(),
            distill: DistillConfig::default(),
            search: EnsConfig::default(),
            finetune: TrainSchedule::default().scaled(0.4),
            erf: ErfConfig::default(),
        }
    }
}

/// Per-purpose seed tags.
#[derive(Clone, Copy, Debug)]
pub enum Stream {
    Data = 1,
    TeacherInit = 2,
    TeacherTrain = 3,
    Library = 4,
    Search = 5,
    Finetune = 6,
    RandomArch = 7,
    ErfProbes = 8,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, EnsError> {
        let text = fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), EnsError> {
        let bad = |m: String| Err(EnsError::Config(m));
        if self.version != CONFIG_VERSION {
            return bad(format!("config version {} is not supported (expected {CONFIG_VERSION})", self.version));
        }
        self.task.validate()?;
        self.model.validate()?;
        self.teacher.validate()?;
        self.distill.validate()?;
        self.search.validate()?;
        self.finetune.validate()?;
        for (name, s) in [("teacher", &self.teacher), ("finetune", &self.finetune)] {
            if let Some(p) = s.phases.iter().find(|p| p.patch > self.task.size) {
                return bad(format!("{name} patch {} exceeds the image size {}", p.patch, self.task.size));
            }
        }
        if self.erf.probes == 0 {
            return bad("erf.probes must be >= 1".into());
        }
        Ok(())
    }

    pub fn seed_for(&self, stream: Stream) -> u64 {
        mix_seed(self.seed, stream as u64)
    }

    /// SHA-256 of the compact JSON serialization.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}
