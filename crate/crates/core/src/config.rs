//! Run configuration loaded from TOML. Every section and key is optional;
//! unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::curate::PipelineConfig;
use crate::data::synth::SceneRanges;
use crate::error::{Error, Result};
use crate::longvideo::LongConfig;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleConfig {
    pub steps: usize,
    pub blend_known_region: bool,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            blend_known_region: false,
        }
    }
}

/// Synthetic corpus settings used by `generate-data`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub fps: f32,
    /// Probability that a generated clip joins two unrelated scenes.
    pub scene_cut_prob: f64,
    pub ranges: SceneRanges,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            frames: 64,
            height: 32,
            width: 32,
            fps: 8.0,
            scene_cut_prob: 0.1,
            ranges: SceneRanges::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    pub curate: PipelineConfig,
    pub synth: SynthConfig,
    /// Frames per training window cut from curated clips.
    pub train_clip_frames: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub long: LongConfig,
    pub pipeline: PipelineSection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Fully resolved config, every key present.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.backbone.validate()?;
        self.train.validate()?;
        if self.long.clip_len == 0 || self.long.overlap() >= self.long.clip_len {
            return Err(Error::Config("long.overlap must be below long.clip_len".into()));
        }
        Ok(())
    }
}

/// `git describe --always --dirty` of the working directory, or `"unknown"`.
pub fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

/// Writes `config.toml` and `provenance.txt` (git describe and seed) into `dir`.
pub fn echo_run(dir: &Path, cfg: &RunConfig, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let c = dir.join("config.toml");
    std::fs::write(&c, cfg.to_toml()?).map_err(|e| Error::io(&c, e))?;
    let p = dir.join("provenance.txt");
    std::fs::write(&p, format!("git_describe={}\nseed={seed}\n", git_describe())).map_err(|e| Error::io(&p, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_roundtrip_through_toml() {
        let mut cfg = RunConfig::default();
        cfg.train.early_stop_ratio = Some(0.25);
        cfg.long.overlap = Some(3);
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert_eq!(RunConfig::from_toml(&RunConfig::default().to_toml().unwrap()).unwrap(), RunConfig::default());
    }

    #[test]
    fn empty_and_partial_files() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
        let c = RunConfig::from_toml("[sample]\nsteps = 7\n").unwrap();
        assert_eq!(c.sample.steps, 7);
        assert!(!c.sample.blend_known_region);
        let c = RunConfig::from_toml("[model.backbone]\nn_layers = 3\n[model.encoder]\n[pipeline.synth.ranges]\n").unwrap();
        assert_eq!(c.model.backbone.n_layers, 3);
        assert_eq!(c.model.backbone.d_model, RunConfig::default().model.backbone.d_model);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::from_toml("[sample]\nstep = 7\n"), Err(Error::Config(_))));
        assert!(RunConfig::from_toml("bogus = 1\n").is_err());
    }

    #[test]
    fn validation() {
        assert!(RunConfig::default().validate().is_ok());
        let mut c = RunConfig::default();
        c.long.overlap = Some(c.long.clip_len);
        assert!(c.validate().is_err());
    }

    #[test]
    fn echo_writes_both_files() {
        let dir = tempfile::tempdir().unwrap();
        echo_run(dir.path(), &RunConfig::default(), 42).unwrap();
        let prov = std::fs::read_to_string(dir.path().join("provenance.txt")).unwrap();
        assert!(prov.contains("seed=42"));
        assert!(prov.starts_with("git_describe="));
        let back = RunConfig::load(&dir.path().join("config.toml")).unwrap();
        assert_eq!(back, RunConfig::default());
    }
}
