//! The single JSON run configuration.
//!
//! Every section is optional; missing keys take their defaults and unknown
//! keys are rejected. The fully resolved form is written next to each run's
//! outputs.

use std::path::PathBuf;

use owis_core::experiment::{IncompletenessConfig, SemiConfig, EVAL_SEED_OFFSET};
use owis_core::{DatasetManifest, DropoutPolicy, EvalConfig, GradCheckSuite, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// When set, replaces the dataset and training seeds.
    pub seed: Option<u64>,
    pub output_dir: PathBuf,
    /// Manifest used by `generate`, and by the training commands when `dataset_path` is unset.
    pub dataset: DatasetManifest,
    /// Existing dataset file to train or evaluate on.
    pub dataset_path: Option<PathBuf>,
    /// Held-out dataset file for `eval`. Defaults to a dense set generated from `dataset`.
    pub eval_dataset_path: Option<PathBuf>,
    pub eval_samples: usize,
    /// Checkpoint for `eval`. Defaults to `<output_dir>/model.json`.
    pub checkpoint: Option<PathBuf>,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub gradcheck: GradCheckSuite,
    pub incompleteness: IncompletenessConfig,
    pub semi: SemiConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            output_dir: PathBuf::from("owis-run"),
            dataset: DatasetManifest::default(),
            dataset_path: None,
            eval_dataset_path: None,
            eval_samples: 100,
            checkpoint: None,
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            gradcheck: GradCheckSuite::default(),
            incompleteness: IncompletenessConfig::default(),
            semi: SemiConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        let mut cfg: RunConfig = serde_json::from_str(text)?;
        if let Some(seed) = cfg.seed {
            cfg.dataset.seed = seed;
            cfg.train.seed = seed;
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> owis_core::Result<()> {
        use owis_core::Error;
        self.dataset.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        self.incompleteness.scene.validate()?;
        self.incompleteness.train.validate()?;
        self.incompleteness.eval.validate()?;
        self.semi.scene.validate()?;
        self.semi.train.validate()?;
        self.semi.eval.validate()?;
        if self.semi.labeled_fractions.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return Err(Error::InvalidArgument("semi labeled_fractions must lie in (0, 1]".into()));
        }
        if self.incompleteness.seeds.is_empty() || self.semi.seeds.is_empty() {
            return Err(Error::InvalidArgument("experiments need at least one seed".into()));
        }
        if self.eval_samples == 0 {
            return Err(Error::InvalidArgument("eval_samples must be positive".into()));
        }
        self.gradcheck.validate()?;
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::InvalidArgument("output_dir must not be empty".into()));
        }
        Ok(())
    }

    /// Dense held-out manifest paired with the training manifest.
    pub fn eval_manifest(&self) -> DatasetManifest {
        DatasetManifest {
            seed: self.dataset.seed ^ EVAL_SEED_OFFSET,
            scene: self.dataset.scene.clone(),
            samples: self.eval_samples,
            dropout: DropoutPolicy::KeepAll,
            labeled_fraction: 1.0,
            sparse_annotations: false,
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.output_dir.join("model.json"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_resolves_to_defaults() {
        let cfg = RunConfig::from_json("{}").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_json(r#"{"trian": {}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"lr": 0.1}}"#).is_err());
    }

    #[test]
    fn top_level_seed_propagates() {
        let cfg = RunConfig::from_json(r#"{"seed": 9}"#).unwrap();
        assert_eq!((cfg.dataset.seed, cfg.train.seed), (9, 9));
    }

    #[test]
    fn resolved_form_round_trips() {
        let cfg = RunConfig::from_json(r#"{"train": {"iterations": 7}}"#).unwrap();
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
    }
}
