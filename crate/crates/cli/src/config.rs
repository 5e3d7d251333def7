//! The run configuration file: model and training sections under a schema
//! version. Unknown keys are rejected everywhere.

use std::fs;
use std::path::Path;

use dmf2mel::model::{Model, ModelConfig};
use dmf2mel::training::TrainConfig;
use dmf2mel::{Error, Result};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn new(d_model: usize, n_subjects: usize) -> Self {
        RunConfig {
            schema_version: SCHEMA_VERSION,
            model: ModelConfig::new(64, n_subjects).with_width(d_model),
            train: TrainConfig::default(),
        }
    }

    /// Parses and validates; every failure is a config error.
    pub fn load(path: &Path) -> Result<Self> {
        let shown = path.display().to_string();
        let text = fs::read_to_string(path).map_err(|e| Error::config(&shown, format!("cannot read: {e}")))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| Error::config(&shown, e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, found {}", self.schema_version),
            ));
        }
        prefix_path("model", self.model.validate())?;
        Model::new(self.model.clone()).map(drop)?;
        self.train.validate()
    }
}

fn prefix_path<T>(prefix: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Config { path, msg } => Error::Config { path: format!("{prefix}.{path}"), msg },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips_and_validates() {
        let c = RunConfig::new(32, 8);
        c.validate().unwrap();
        let json = serde_json::to_string_pretty(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&json).unwrap(), c);
    }

    #[test]
    fn errors_carry_field_paths() {
        let mut c = RunConfig::new(32, 8);
        c.model.dcfam.window = 4;
        assert!(matches!(c.validate(), Err(Error::Config { path, .. }) if path == "model.dcfam.window"));
        let mut c = RunConfig::new(32, 8);
        c.train.lr = -1.0;
        assert!(matches!(c.validate(), Err(Error::Config { path, .. }) if path == "train.lr"));
        let mut c = RunConfig::new(32, 8);
        c.schema_version = 2;
        assert!(matches!(c.validate(), Err(Error::Config { path, .. }) if path == "schema_version"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let json = serde_json::to_string(&RunConfig::new(16, 2)).unwrap();
        let typo = json.replacen("\"convmamba\":true", "\"convmaba\":true", 1);
        assert_ne!(typo, json);
        assert!(serde_json::from_str::<RunConfig>(&typo).is_err());
    }
}
