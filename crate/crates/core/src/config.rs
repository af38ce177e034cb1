//! Run configuration: one TOML or JSON document covering every stage.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::common_traits::FeatureSource;
use crate::data::AugmentConfig;
use crate::error::{ensure, Error, Result};
use crate::feature_viz::InversionConfig;
use crate::percept_study::{Domain, PerturbSpec};
use crate::proto_model::ModelConfig;
use crate::trainer::TrainConfig;

/// Default output directory when `--out` is not given.
pub const OUT_ENV: &str = "ASXAI_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToyData {
    pub classes: usize,
    pub per_class: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Folder-per-class directory, or a directory holding `manifest.csv`.
    pub root: Option<PathBuf>,
    /// Synthetic stripes dataset used when `root` is unset.
    pub toy: Option<ToyData>,
    pub augmentation: AugmentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConceptConfig {
    pub cluster_count: usize,
    /// Renames `concept_<k>` labels.
    pub names: BTreeMap<String, String>,
    /// Images per class whose rank profiles are averaged by `rank`.
    pub rank_images: usize,
}

impl Default for ConceptConfig {
    fn default() -> Self {
        Self {
            cluster_count: 3,
            names: BTreeMap::new(),
            rank_images: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraitConfig {
    pub samples: usize,
    pub k: Option<usize>,
    pub source: FeatureSource,
}

impl Default for TraitConfig {
    fn default() -> Self {
        Self {
            samples: 100,
            k: None,
            source: FeatureSource::MaskWeighted,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PerceptConfig {
    #[serde(flatten)]
    pub spec: PerturbSpec,
    pub samples_per_category: usize,
    pub domains: Vec<Domain>,
}

impl Default for PerceptConfig {
    fn default() -> Self {
        Self {
            spec: PerturbSpec::default(),
            samples_per_category: 500,
            domains: Domain::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    pub templates: Option<PathBuf>,
    /// Percentile of the similarity map kept in salient-region masks.
    pub salient_percentile: f64,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        Self {
            templates: None,
            salient_percentile: 95.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Single source of randomness; overrides `train.seed`.
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub concepts: ConceptConfig,
    pub traits: TraitConfig,
    pub inversion: InversionConfig,
    pub percept: PerceptConfig,
    pub explain: ExplainConfig,
}

impl RunConfig {
    /// Parses TOML, or JSON when the path ends in `.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg = if path.extension().is_some_and(|e| e == "json") {
            Self::from_json(&text)?
        } else {
            Self::from_toml(&text)?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.inversion.validate()?;
        self.percept.spec.validate()?;
        ensure(self.data.root.is_some() || self.data.toy.is_some(), || {
            "config needs data.root or data.toy".into()
        })?;
        if let Some(toy) = &self.data.toy {
            ensure(toy.classes >= 2 && toy.per_class >= 1, || {
                "toy data needs >= 2 classes and >= 1 image per class".into()
            })?;
        }
        ensure(self.concepts.cluster_count >= 1, || "concepts.cluster_count must be >= 1".into())?;
        ensure(self.traits.samples >= 2, || "traits.samples must be >= 2".into())?;
        ensure((0.0..100.0).contains(&self.explain.salient_percentile), || {
            "explain.salient_percentile must be in [0, 100)".into()
        })?;
        ensure(self.percept.samples_per_category >= 2, || {
            "percept.samples_per_category must be >= 2".into()
        })
    }

    /// Training settings with the run seed applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// SHA-256 of the canonical JSON form (sorted keys, no whitespace).
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canonical = serde_json::to_string(&value).expect("value serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

/// `--out`, else `$ASXAI_OUT`, else `./asxai_out`.
pub fn resolve_out_dir(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("asxai_out"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_ignores_key_order() {
        let a = RunConfig::from_toml("seed = 4\n[data.toy]\nclasses = 2\nper_class = 3\n[train]\nlearning_rate = 0.01\nbatch_size = 8\n").unwrap();
        let b = RunConfig::from_toml("[train]\nbatch_size = 8\nlearning_rate = 0.01\n[data.toy]\nper_class = 3\nclasses = 2\n\n").unwrap();
        let c: RunConfig = RunConfig::from_json(r#"{"data":{"toy":{"per_class":3,"classes":2}},"train":{"batch_size":8,"learning_rate":0.01},"seed":4}"#).unwrap();
        let b = RunConfig { seed: 4, ..b };
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash(), c.hash());
        assert_ne!(a.hash(), RunConfig { seed: 5, ..a.clone() }.hash());
    }

    #[test]
    fn unknown_keys_and_missing_data_are_rejected() {
        assert!(RunConfig::from_toml("sede = 1").is_err());
        assert!(RunConfig::default().validate().is_err());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig {
            data: DataConfig {
                toy: Some(ToyData { classes: 2, per_class: 4 }),
                ..Default::default()
            },
            ..Default::default()
        };
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }
}
