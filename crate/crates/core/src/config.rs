//! Declarative experiment files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{load_speech_commands, synth_dataset, Splits};
use crate::error::{Error, Result};
use crate::nas::{FrontEnd, SearchConfig, SupernetSpec};
use crate::quant::QuantPolicy;
use crate::train::TrainConfig;

pub const CONFIG_VERSION: u32 = 1;
pub const DATA_ROOT_ENV: &str = "KWSNAS_DATA_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Speech commands v2 folder; without `path` the data-root environment
    /// variable is used.
    SpeechCommands {
        #[serde(default)]
        path: Option<PathBuf>,
    },
    Synth {
        classes: usize,
        per_class: usize,
    },
}

impl DatasetSpec {
    pub fn load(&self, data_root: Option<&Path>, seed: u64) -> Result<Splits> {
        match self {
            DatasetSpec::Synth { classes, per_class } => synth_dataset(*classes, *per_class, seed),
            DatasetSpec::SpeechCommands { path } => {
                let root = path.as_deref().or(data_root).ok_or_else(|| {
                    Error::Config(format!("speech_commands needs a `path` or the {DATA_ROOT_ENV} variable"))
                })?;
                load_speech_commands(root, seed)
            }
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            DatasetSpec::Synth { classes, .. } => *classes,
            DatasetSpec::SpeechCommands { .. } => crate::data::SILENCE_LABEL + 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub format_version: u32,
    #[serde(default)]
    pub name: String,
    pub dataset: DatasetSpec,
    pub frontend: FrontEnd,
    /// Width multiplier `m`.
    pub width: f64,
    /// Weight of the expected-ops penalty during search.
    #[serde(default)]
    pub beta: f64,
    pub search: SearchConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub quantization: Option<QuantPolicy>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "format_version {} is not supported (expected {CONFIG_VERSION})",
                self.format_version
            )));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config("beta must be >= 0".into()));
        }
        self.supernet_spec().validate()?;
        self.search_config().validate()?;
        self.train.validate()?;
        if let Some(q) = &self.quantization {
            q.validate()?;
        }
        Ok(())
    }

    pub fn supernet_spec(&self) -> SupernetSpec {
        SupernetSpec::new(self.width, self.frontend, self.dataset.num_classes())
    }

    pub fn search_config(&self) -> SearchConfig {
        SearchConfig {
            beta: self.beta,
            ..self.search.clone()
        }
    }

    /// Desk-scale preset on the synthetic task.
    pub fn desk(classes: usize, per_class: usize) -> Self {
        let mut search = SearchConfig::new(20, 16, 0.0);
        search.arch_lr = 3e-2;
        let mut train = TrainConfig::new(30, 16);
        train.optimizer = crate::train::OptimizerConfig::adam(3e-3);
        Self {
            format_version: CONFIG_VERSION,
            name: format!("synth{classes}"),
            dataset: DatasetSpec::Synth { classes, per_class },
            frontend: FrontEnd::sinc(40),
            width: 0.5,
            beta: 0.0,
            search,
            train,
            quantization: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_preset_round_trips() {
        let cfg = ExperimentConfig::desk(4, 60);
        let back = ExperimentConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let mut v = serde_json::to_value(ExperimentConfig::desk(4, 60)).unwrap();
        v["surprise"] = serde_json::json!(1);
        let err = ExperimentConfig::from_json(&v.to_string()).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert_eq!(err.exit_code(), 2);

        let mut v = serde_json::to_value(ExperimentConfig::desk(4, 60)).unwrap();
        v["search"]["beta"] = serde_json::json!(4);
        assert!(ExperimentConfig::from_json(&v.to_string()).is_err());
    }

    #[test]
    fn bad_width_rejected() {
        let mut cfg = ExperimentConfig::desk(4, 60);
        cfg.width = 0.25;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn speech_commands_without_root_is_config_error() {
        let d = DatasetSpec::SpeechCommands { path: None };
        assert!(matches!(d.load(None, 0), Err(Error::Config(_))));
    }
}
