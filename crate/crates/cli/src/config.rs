//! Strict JSON run configuration.

use std::path::{Path, PathBuf};

use danet_core::data::{load_split, synthetic_splits, Dataset, SyntheticSpec};
use danet_core::detector::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Where images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataConfig {
    /// Generated in memory from a spec.
    Synthetic {
        #[serde(default)]
        spec: SyntheticSpec,
        train: usize,
        test: usize,
    },
    /// A dataset directory holding `manifest.json`, `images/` and
    /// `annotations/`.
    Directory { root: PathBuf },
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig::Synthetic {
            spec: SyntheticSpec::default(),
            train: 200,
            test: 50,
        }
    }
}

impl DataConfig {
    pub fn load(&self) -> CliResult<(Dataset, Dataset)> {
        Ok(match self {
            DataConfig::Synthetic { spec, train, test } => synthetic_splits(spec, *train, *test)?,
            DataConfig::Directory { root } => (load_split(root, "train")?, load_split(root, "test")?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    /// Desk-scale synthetic run with all four components switched on.
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            model: ModelConfig::toy(),
            train: TrainConfig::toy(20),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    /// Smaller default for the five-row ablation lattice.
    pub fn ablation() -> Self {
        RunConfig {
            out_dir: PathBuf::from("runs/ablation"),
            train: TrainConfig::toy(10),
            data: DataConfig::Synthetic {
                spec: SyntheticSpec::default(),
                train: 60,
                test: 30,
            },
            ..Default::default()
        }
    }

    pub fn from_json(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            CliError::Config(m) => CliError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialises")
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if let DataConfig::Synthetic { spec, train, .. } = &self.data {
            spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
            if *train == 0 {
                return Err(CliError::Config("synthetic `train` count must be positive".into()));
            }
            if spec.classes.len() != self.model.num_classes {
                return Err(CliError::Config(format!(
                    "data has {} classes, model.num_classes is {}",
                    spec.classes.len(),
                    self.model.num_classes
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_echo_the_training_recipe() {
        let c = RunConfig::default();
        let s = c.train.sgd;
        assert_eq!((s.lr, s.momentum, s.weight_decay, c.train.batch_size), (0.02, 0.9, 0.0001, 4));
        assert!(c.model.toggles.fpn && c.model.toggles.dcn && c.model.toggles.cbam && c.model.toggles.focal);
        c.validate().unwrap();
        RunConfig::ablation().validate().unwrap();
    }

    #[test]
    fn round_trip_and_partial_documents() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
        let p = RunConfig::from_json(r#"{"seed": 9, "data": {"synthetic": {"train": 5, "test": 2}}}"#).unwrap();
        assert_eq!(p.seed, 9);
        assert_eq!(p.model, ModelConfig::toy());
    }

    #[test]
    fn misspelled_keys_are_named() {
        for (doc, key) in [
            (r#"{"sede": 1}"#, "sede"),
            (r#"{"train": {"epochz": 1}}"#, "epochz"),
            (r#"{"model": {"toggles": {"dnc": true}}}"#, "dnc"),
            (r#"{"data": {"synthetic": {"train": 1, "test": 1, "spec": {"widht": 3}}}}"#, "widht"),
        ] {
            match RunConfig::from_json(doc) {
                Err(CliError::Config(m)) => assert!(m.contains(key), "{m}"),
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn class_count_mismatch_is_a_config_error() {
        let mut c = RunConfig::default();
        c.model.num_classes = 3;
        assert!(matches!(c.validate(), Err(CliError::Config(_))));
    }
}
