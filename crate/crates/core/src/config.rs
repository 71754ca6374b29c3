//! JSON experiment configuration.
//!
//! Every field has a default, unknown fields are rejected and errors name the
//! offending JSON path.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::splits::SplitStrategy;
use crate::data::synth::{synth_generate, Distribution, SynthSpec};
use crate::data::{load_manifest, DatasetIndex};
use crate::error::{Error, Result};
use crate::experiments::FinetuneSpec;
use crate::train::TrainConfig;
use crate::unet::ModelConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        #[serde(default)]
        spec: SynthSpec,
        #[serde(default)]
        seed: u64,
    },
    Manifest {
        path: PathBuf,
        cohort: String,
    },
}

impl DataSource {
    pub fn synthetic(distribution: Distribution, n_patients: usize, seed: u64) -> Self {
        DataSource::Synthetic { spec: SynthSpec::new(distribution, n_patients), seed }
    }

    /// Name used in reports.
    pub fn cohort(&self) -> String {
        match self {
            DataSource::Synthetic { spec, .. } => format!("{:?}", spec.distribution),
            DataSource::Manifest { cohort, .. } => cohort.clone(),
        }
    }

    /// Generates or loads the dataset. Relative manifest paths resolve against `base`.
    pub fn load(&self, base: &Path) -> Result<DatasetIndex> {
        match self {
            DataSource::Synthetic { spec, seed } => synth_generate(spec, *seed),
            DataSource::Manifest { path, cohort } => load_manifest(&base.join(path), cohort),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Cohort used for training and cross-validation.
    pub train: DataSource,
    /// Cohort never trained on by the baseline.
    pub unseen: Option<DataSource>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            train: DataSource::synthetic(Distribution::A, 16, 1),
            unseen: Some(DataSource::synthetic(Distribution::B, 16, 2)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentSection {
    pub name: String,
    pub folds: usize,
    pub split: SplitStrategy,
    /// Fold whose split and model serve `train` and the finetuning baseline.
    pub baseline_fold: usize,
    /// Existing baseline for finetuning; trained on `baseline_fold` when absent.
    pub baseline_checkpoint: Option<PathBuf>,
    pub finetune: FinetuneSpec,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            name: "baseline".into(),
            folds: 4,
            split: SplitStrategy::Auto,
            baseline_fold: 0,
            baseline_checkpoint: None,
            finetune: FinetuneSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub experiment: ExperimentSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            experiment: ExperimentSection::default(),
        }
    }
}

fn at(path: &str, e: Error) -> Error {
    Error::Config(format!("at `{path}`: {e}"))
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("at `{path}`: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "at `schema_version`: expected {SCHEMA_VERSION}, found {}",
                self.schema_version
            )));
        }
        if let DataSource::Synthetic { spec, .. } = &self.dataset.train {
            spec.validate().map_err(|e| at("dataset.train.spec", e))?;
        }
        if let Some(DataSource::Synthetic { spec, .. }) = &self.dataset.unseen {
            spec.validate().map_err(|e| at("dataset.unseen.spec", e))?;
        }
        self.model.validate().map_err(|e| at("model", e))?;
        self.train.validate().map_err(|e| at("train", e))?;
        let x = &self.experiment;
        if x.folds < 2 {
            return Err(at("experiment.folds", Error::Config("need at least 2 folds".into())));
        }
        if x.baseline_fold >= x.folds {
            return Err(at("experiment.baseline_fold", Error::Config(format!("must be below {}", x.folds))));
        }
        if x.name.is_empty() || x.name.contains(['/', '\\']) {
            return Err(at("experiment.name", Error::Config("must be a plain directory name".into())));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_gives_defaults() {
        let c = ExperimentConfig::from_json("{}").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.model.input_size, [224, 224]);
        assert_eq!(c.model.dropout_schedule, [0.3, 0.37, 0.43, 0.5, 0.5]);
        assert_eq!((c.train.batch_size, c.train.initial_lr, c.train.lr_factor), (32, 1e-3, 0.5));
        assert_eq!((c.train.lr_patience, c.train.min_lr, c.train.early_stop_patience), (5, 1e-8, 10));
        assert_eq!(c.experiment.folds, 4);
    }

    #[test]
    fn round_trips_through_json() {
        let c = ExperimentConfig::default();
        let text = serde_json::to_string_pretty(&c).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), c);
    }

    #[test]
    fn unknown_field_names_its_path() {
        let err = ExperimentConfig::from_json(r#"{"train": {"batch_size": 8, "learning_rate": 1}}"#).unwrap_err();
        let msg = err.to_string();
        assert!(err.is_config());
        assert!(msg.contains("train"), "{msg}");
        assert!(msg.contains("learning_rate"), "{msg}");

        let err = ExperimentConfig::from_json(r#"{"model": {"input_size": [224, "x"]}}"#).unwrap_err();
        assert!(err.to_string().contains("model.input_size"), "{err}");

        let err = ExperimentConfig::from_json(r#"{"dataset": {"train": {"kind": "synthetic", "bogus": 1}}}"#).unwrap_err();
        assert!(err.to_string().contains("dataset.train"), "{err}");
    }

    #[test]
    fn semantic_errors_name_the_section() {
        let err = ExperimentConfig::from_json(r#"{"model": {"input_size": [100, 100]}}"#).unwrap_err();
        assert!(err.to_string().contains("`model`"), "{err}");
        let err = ExperimentConfig::from_json(r#"{"schema_version": 9}"#).unwrap_err();
        assert!(err.to_string().contains("schema_version"), "{err}");
        let err = ExperimentConfig::from_json(r#"{"experiment": {"folds": 4, "baseline_fold": 4}}"#).unwrap_err();
        assert!(err.to_string().contains("experiment.baseline_fold"), "{err}");
    }

    #[test]
    fn manifest_source() {
        let c = ExperimentConfig::from_json(
            r#"{"dataset": {"train": {"kind": "manifest", "path": "acdc.json", "cohort": "ACDC"}, "unseen": null}}"#,
        )
        .unwrap();
        assert_eq!(c.dataset.train.cohort(), "ACDC");
        assert!(c.dataset.unseen.is_none());
    }
}
