//! One JSON document configuring every stage, with seeds derived from a
//! single top-level value.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::EvalConfig;
use crate::pipeline::PipelineConfig;
use crate::synth::SynthConfig;
use crate::trainer::TrainConfig;

/// Stable sub-seed for a named stage (FNV-1a over the name and the seed).
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stage.bytes().chain(seed.to_le_bytes()) {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; unset means one per core.
    pub threads: Option<usize>,
    /// Synthetic scene generation.
    pub scene: SynthConfig,
    pub trainer: TrainConfig,
    pub pipeline: PipelineConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.threads == Some(0) {
            return Err(Error::Config("threads must be at least 1".into()));
        }
        self.scene.validate()?;
        self.resolved_pipeline().validate()?;
        self.eval.validate()
    }

    pub fn resolved_synth(&self) -> SynthConfig {
        SynthConfig {
            seed: stage_seed(self.seed, "synth"),
            ..self.scene.clone()
        }
    }

    /// Pipeline settings with the trainer section and its derived seed.
    pub fn resolved_pipeline(&self) -> PipelineConfig {
        let mut p = self.pipeline.clone();
        p.train = TrainConfig {
            seed: stage_seed(self.seed, "train"),
            ..self.trainer.clone()
        };
        p
    }

    pub fn resolved_eval(&self) -> EvalConfig {
        EvalConfig {
            seed: stage_seed(self.seed, "eval"),
            ..self.eval.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_seeds_are_stable_and_distinct() {
        assert_eq!(stage_seed(7, "train"), stage_seed(7, "train"));
        assert_ne!(stage_seed(7, "train"), stage_seed(7, "synth"));
        assert_ne!(stage_seed(7, "train"), stage_seed(8, "train"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"trainer": {"iterations": 5}}"#).is_ok());
        assert!(serde_json::from_str::<RunConfig>(r#"{"trainer": {"iters": 5}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"extra": 1}"#).is_err());
    }

    #[test]
    fn resolution_derives_seeds() {
        let c = RunConfig {
            seed: 3,
            ..RunConfig::default()
        };
        assert_eq!(c.resolved_pipeline().train.seed, stage_seed(3, "train"));
        assert_eq!(c.resolved_eval().seed, stage_seed(3, "eval"));
        c.validate().unwrap();
    }
}
