//! JSON run configuration and run manifests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::training::TrainConfig;

pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";

/// Parses a training config from JSON text. Missing keys take defaults,
/// unknown keys are rejected, and the result is validated.
pub fn parse_config_str(text: &str) -> Result<TrainConfig> {
    let cfg = if text.trim().is_empty() {
        TrainConfig::default()
    } else {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let field = e.path().to_string();
            Error::config(if field == "." { "<root>".into() } else { field }, e.into_inner().to_string())
        })?
    };
    cfg.validate()?;
    Ok(cfg)
}

/// [`parse_config_str`] on the contents of `path`.
pub fn parse_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::config("<file>", format!("{}: {e}", path.display())))?;
    parse_config_str(&text)
}

/// Record written by every command, enough to re-run it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub args: Vec<String>,
    pub config: serde_json::Value,
    pub seed: u64,
    pub codec_version: Option<String>,
    pub artifacts: BTreeMap<String, PathBuf>,
    /// Seconds since the Unix epoch at start.
    pub started_at: u64,
    pub wall_clock_secs: f64,
    pub checkpoint_sha256: Option<String>,
}

impl RunManifest {
    pub fn new(command: impl Into<String>, seed: u64) -> Self {
        RunManifest {
            command: command.into(),
            args: std::env::args().collect(),
            config: serde_json::Value::Null,
            seed,
            codec_version: None,
            artifacts: BTreeMap::new(),
            started_at: std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            wall_clock_secs: 0.0,
            checkpoint_sha256: None,
        }
    }

    pub fn with_config(mut self, cfg: &impl Serialize) -> Result<Self> {
        self.config = serde_json::to_value(cfg)?;
        Ok(self)
    }

    pub fn artifact(&mut self, name: impl Into<String>, path: impl Into<PathBuf>) {
        self.artifacts.insert(name.into(), path.into());
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(RUN_MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_gives_defaults() {
        let c = parse_config_str("").unwrap();
        assert_eq!((c.crop, c.batch), (128, 16));
        assert_eq!((c.lr_rate, c.adam_beta1, c.adam_beta2), (5e-5, 0.9, 0.999));
        assert_eq!(parse_config_str("{}").unwrap(), c);
    }

    #[test]
    fn field_precise_errors() {
        let field = |text: &str| match parse_config_str(text) {
            Err(Error::Config { field, .. }) => field,
            other => panic!("expected config error, got {other:?}"),
        };
        assert_eq!(field(r#"{"crop": 130}"#), "crop");
        assert_eq!(field(r#"{"aug_prob": 1.5}"#), "aug_prob");
        assert_eq!(field(r#"{"model": {"gen_channel": 8}}"#), "model.gen_channel");
        assert_eq!(field(r#"{"loss": {"beta": "x"}}"#), "loss.beta");
        assert!(parse_config_str(r#"{"bogus": 1}"#).is_err());
    }
}
