//! Run configuration: a JSON tree with defaults for every field, dot-path
//! overrides, and a content hash that tags every artifact.

use std::path::{Path, PathBuf};

use lcr2s::data::SyntheticConfig;
use lcr2s::eval::EvalFeatures;
use lcr2s::training::TrainConfig;
use lcr2s::Error;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub synthetic: SyntheticConfig,
    /// Identities generated after the training ones and kept for evaluation.
    pub holdout_identities: usize,
    /// Feature file to train on instead of the synthetic training split.
    pub train_path: Option<PathBuf>,
    /// Feature file to evaluate on instead of the synthetic holdout split.
    pub eval_path: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            synthetic: SyntheticConfig::default(),
            holdout_identities: 32,
            train_path: None,
            eval_path: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub features: EvalFeatures,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Drives data synthesis and every training stream.
    pub seed: u64,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Reads a config file; absent keys keep their defaults.
    pub fn from_file(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies `key.path=value` overrides. Values parse as JSON and fall back
    /// to plain strings, so `train.student.kd_mode=tir` needs no quoting.
    pub fn with_overrides<S: AsRef<str>>(&self, sets: &[S]) -> Result<Self, Error> {
        if sets.is_empty() {
            return Ok(self.clone());
        }
        let mut tree = serde_json::to_value(self).map_err(|e| Error::Config(e.to_string()))?;
        for s in sets {
            let s = s.as_ref();
            let (key, raw) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
            let value =
                serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let slot = lookup(&mut tree, key)?;
            *slot = value;
        }
        serde_json::from_value(tree).map_err(|e| Error::Config(format!("after overrides: {e}")))
    }

    pub fn validate(&self) -> Result<(), Error> {
        if self.data.train_path.is_none() {
            self.synthetic().validate()?;
        }
        if self.data.eval_path.is_none() {
            self.synthetic().validate()?;
            if self.data.holdout_identities == 0 {
                return Err(Error::Config(
                    "holdout_identities must be at least 1".into(),
                ));
            }
        }
        self.train.validate()
    }

    pub fn synthetic(&self) -> SyntheticConfig {
        SyntheticConfig {
            seed: self.seed,
            ..self.data.synthetic.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Canonical JSON: struct fields serialize in declaration order.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact canonical JSON, hex encoded.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

fn lookup<'v>(tree: &'v mut Value, key: &str) -> Result<&'v mut Value, Error> {
    let mut node = tree;
    for part in key.split('.') {
        node = match node {
            Value::Object(map) => map.get_mut(part).ok_or_else(|| {
                Error::Config(format!("unknown config key {key:?} (no field {part:?})"))
            })?,
            _ => {
                return Err(Error::Config(format!(
                    "config key {key:?} descends into a non-object"
                )))
            }
        };
    }
    Ok(node)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.hash().len(), 64);
    }

    #[test]
    fn overrides() {
        let c = RunConfig::default()
            .with_overrides(&[
                "train.student.kd_mode=tir",
                "data.synthetic.n_identities=8",
                "seed=3",
            ])
            .unwrap();
        assert_eq!(c.train.student.kd_mode.to_string(), "tir");
        assert_eq!(c.data.synthetic.n_identities, 8);
        assert_eq!(c.synthetic().seed, 3);
        assert_ne!(c.hash(), RunConfig::default().hash());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::default()
            .with_overrides(&["train.nope=1"])
            .is_err());
        assert!(RunConfig::default().with_overrides(&["seed"]).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"extra": 1}}"#).is_err());
        assert!(
            serde_json::from_str::<RunConfig>(r#"{"data": {"synthetic": {"seed": 1}}}"#).is_err()
        );
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"train": {"model": {"d": 32}}}"#).unwrap();
        assert_eq!(c.train.model.d, 32);
        assert_eq!(c.train.model.mhaf.heads, 16);
        assert_eq!(c.data.holdout_identities, 32);
    }

    #[test]
    fn validation() {
        let bad = RunConfig::default()
            .with_overrides(&["data.synthetic.n_identities=0"])
            .unwrap();
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        RunConfig::default().validate().unwrap();
    }
}
