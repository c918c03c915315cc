//! Versioned TOML run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::distill::DistillConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::stream::StreamConfig;
use crate::synthworld::{WorldConfig, RATE_RATIO};
use crate::train::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub version: u32,
    pub output_dir: PathBuf,
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub distill: DistillConfig,
    pub stream: StreamConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::with_dim(32)
    }
}

impl RunConfig {
    pub fn with_dim(dim: usize) -> Self {
        let world = WorldConfig::default();
        Self {
            version: CONFIG_VERSION,
            output_dir: PathBuf::from("runs"),
            model: ModelConfig::for_world(&world, dim),
            world,
            train: TrainConfig::default(),
            distill: DistillConfig::default(),
            stream: StreamConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!("config version {} (expected {CONFIG_VERSION})", self.version)));
        }
        self.model.validate(&self.world)?;
        let g = &self.model.geometry;
        if g.audio_frames() != RATE_RATIO * g.video_frames {
            return Err(Error::Config("audio frames per chunk must be 4 × video frames".into()));
        }
        self.train.validate()?;
        self.distill.validate()?;
        if self.distill.student_steps != self.stream.sampling_steps {
            return Err(Error::Config("stream.sampling_steps must equal distill.student_steps".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let c: Self = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let s = c.to_toml().unwrap();
        assert!(s.contains("version = 1"));
        assert_eq!(RunConfig::from_toml(&s).unwrap(), c);
    }

    #[test]
    fn rejects_bad_versions_and_geometry() {
        let mut c = RunConfig::default();
        c.version = 2;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.model.geometry.motion_frames = 10;
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.distill.loss_window = 6;
        assert!(c.validate().is_err());
        assert!(RunConfig::from_toml("version = 1").is_err());
    }
}
