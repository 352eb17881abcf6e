//! Dataset manifest: class vocabulary plus train/test id lists.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The six surface-defect categories of the steel benchmark this detector
/// targets.
pub const STEEL_DEFECT_CLASSES: [&str; 6] = [
    "crazing",
    "inclusion",
    "patches",
    "pitted_surface",
    "rolled-in_scale",
    "scratches",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for c in &self.classes {
            if !seen.insert(c) {
                return Err(Error::Validation(format!("class `{c}` listed twice")));
            }
        }
        let mut ids = HashSet::new();
        for id in self.train.iter().chain(&self.test) {
            if !ids.insert(id) {
                return Err(Error::Validation(format!(
                    "image id `{id}` appears more than once across the splits"
                )));
            }
        }
        Ok(())
    }

    pub fn class_index(&self, name: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::Validation(format!("class `{name}` is not in the manifest vocabulary")))
    }

    pub fn split(&self, name: &str) -> Result<&[String]> {
        match name {
            "train" => Ok(&self.train),
            "test" => Ok(&self.test),
            other => Err(Error::invalid("split", format!("unknown split `{other}`, use train or test"))),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: DatasetManifest = serde_json::from_slice(&fs::read(path)?)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overlapping_splits_are_rejected() {
        let m = DatasetManifest {
            classes: vec!["a".into()],
            train: vec!["x".into(), "y".into()],
            test: vec!["y".into()],
        };
        assert!(m.validate().is_err());
        let ok = DatasetManifest {
            test: vec!["z".into()],
            ..m
        };
        ok.validate().unwrap();
        assert_eq!(ok.class_index("a").unwrap(), 0);
        assert!(ok.class_index("b").is_err());
    }

    #[test]
    fn unknown_keys_fail() {
        let err = serde_json::from_str::<DatasetManifest>(r#"{"classes":[],"train":[],"test":[],"extra":1}"#);
        assert!(err.unwrap_err().to_string().contains("extra"));
    }
}
