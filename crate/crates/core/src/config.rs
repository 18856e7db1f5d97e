//! Versioned TOML experiment configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::train::TrainConfig;
use crate::{Error, Result};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Config schema version; bumped on breaking layout changes.
    pub version: u32,
    /// Where run artifacts (logs, checkpoints, reports) are written.
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub train: TrainConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentConfig {
    pub fn new(train: TrainConfig) -> ExperimentConfig {
        ExperimentConfig {
            version: CONFIG_VERSION,
            output_dir: default_output_dir(),
            train,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig = toml::from_str(text)
            .map_err(|e| Error::Config(format!("config parse error: {}", e.message())))?;
        if cfg.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_toml_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)
            .map_err(|e| Error::io(path.display().to_string(), e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::{ArchSpec, BaselineKind};

    #[test]
    fn roundtrip_preserves_fields() {
        let mut tc = TrainConfig::new(ArchSpec::toy_highres(2), BaselineKind::CrossStitch, 77);
        tc.steps = 123;
        tc.lr = 0.5;
        let cfg = ExperimentConfig::new(tc);
        let text = cfg.to_toml_string().unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(back.train.steps, 123);
        assert_eq!(back.train.lr, 0.5);
        assert_eq!(back.train.seed, 77);
        assert_eq!(back.train.baseline, BaselineKind::CrossStitch);
    }

    #[test]
    fn minimal_config_uses_defaults() {
        let text = r#"
            version = 1
            [train]
            baseline = "sfg"
            seed = 3
            [train.arch]
            arch = "toy_vgg"
            width_scale = 1
        "#;
        let cfg = ExperimentConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.train.lr, 1e-3);
        assert_eq!(cfg.train.batch_size, 16);
        assert_eq!(cfg.train.lambda1, 1e-6);
        assert_eq!(cfg.train.lambda2, 1e-5);
        assert_eq!(cfg.train.temp.rate, 1e-5);
        assert_eq!(cfg.train.temp.floor, 0.10);
        assert_eq!(cfg.output_dir, PathBuf::from("runs"));
    }

    #[test]
    fn unknown_field_is_named_in_the_error() {
        let text = r#"
            version = 1
            [train]
            baseline = "sfg"
            seed = 3
            learning_rate_typo = 0.1
            [train.arch]
            arch = "toy_vgg"
            width_scale = 1
        "#;
        let err = ExperimentConfig::from_toml_str(text).unwrap_err();
        assert!(err.to_string().contains("learning_rate_typo"), "{err}");
    }

    #[test]
    fn wrong_version_is_rejected() {
        let text = r#"
            version = 9
            [train]
            baseline = "sfg"
            seed = 3
            [train.arch]
            arch = "toy_vgg"
            width_scale = 1
        "#;
        let err = ExperimentConfig::from_toml_str(text).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }
}
