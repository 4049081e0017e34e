//! Experiment configuration: a single JSON document, with a handful of
//! command-line overrides applied on top.  The resolved form is what gets
//! hashed into the run id and echoed into `run_manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use cfct_core::ingest::InputFormat;
use cfct_core::losses::LossKind;
use cfct_core::trainer::HyperParams;

use crate::CliError;

/// Where the interaction log lives and how to parse it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub path: PathBuf,
    #[serde(default)]
    pub format: InputFormat,
}

/// Per-user holdout parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            test_fraction: 0.2,
            seed: 42,
        }
    }
}

fn default_cutoffs() -> Vec<usize> {
    vec![5, 10, 20]
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// Everything a run needs.  Unknown fields are rejected so typos surface
/// as config errors instead of silently using defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub split: SplitConfig,
    #[serde(default)]
    pub hyper: HyperParams,
    #[serde(default = "default_cutoffs")]
    pub cutoffs: Vec<usize>,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Train with the lock-free parallel loop instead of the sequential one.
    #[serde(default)]
    pub parallel: bool,
    /// Grid of `m_positives` values for `sweep`; empty means "hold at the
    /// configured value".
    #[serde(default)]
    pub sweep_m: Vec<usize>,
    /// Grid of `alpha` values for `sweep`; empty means "hold at the
    /// configured value".
    #[serde(default)]
    pub sweep_alpha: Vec<f64>,
}

/// Flag-level overrides; every field is optional and wins over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub loss: Option<LossKind>,
    pub out: Option<PathBuf>,
    pub parallel: bool,
}

impl ExperimentConfig {
    /// Loads, applies `overrides`, and validates.  `--seed` moves both the
    /// training seed and the split seed so one flag pins a whole run.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| {
            CliError::usage(format!("cannot read config {}: {e}", path.display()))
        })?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::usage(format!("invalid config {}: {e}", path.display())))?;
        if let Some(seed) = overrides.seed {
            cfg.hyper.seed = seed;
            cfg.split.seed = seed;
        }
        if let Some(loss) = overrides.loss {
            cfg.hyper.loss = loss;
        }
        if let Some(out) = &overrides.out {
            cfg.out_dir = out.clone();
        }
        cfg.parallel |= overrides.parallel;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if !self.dataset.path.exists() {
            return Err(CliError::usage(format!(
                "dataset file not found: {}",
                self.dataset.path.display()
            )));
        }
        if !(0.0 < self.split.test_fraction && self.split.test_fraction < 1.0) {
            return Err(CliError::usage(format!(
                "split.test_fraction must lie strictly between 0 and 1, got {}",
                self.split.test_fraction
            )));
        }
        if self.cutoffs.is_empty() || self.cutoffs.contains(&0) {
            return Err(CliError::usage(
                "cutoffs must be a non-empty list of positive ranks".into(),
            ));
        }
        self.hyper
            .validate()
            .map_err(|e| CliError::usage(e.to_string()))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn config_with_dataset(dir: &Path, body: &str) -> String {
        let data = dir.join("log.tsv");
        let mut f = fs::File::create(&data).unwrap();
        writeln!(f, "u1\ti1\t5\t0").unwrap();
        body.replace("DATASET", data.to_str().unwrap())
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let text = config_with_dataset(dir.path(), r#"{"dataset":{"path":"DATASET"}}"#);
        let cfg: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(cfg.dataset.format, InputFormat::Tsv4Col);
        assert_eq!(cfg.split.test_fraction, 0.2);
        assert_eq!(cfg.cutoffs, vec![5, 10, 20]);
        assert_eq!(cfg.hyper, HyperParams::default());
        assert!(!cfg.parallel);
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = serde_json::from_str::<ExperimentConfig>(
            r#"{"dataset":{"path":"x"},"learning_rate":0.1}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("learning_rate"));
    }

    #[test]
    fn overrides_replace_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let text = config_with_dataset(
            dir.path(),
            r#"{"dataset":{"path":"DATASET"},"hyper":{"seed":1,"loss":"bpr"}}"#,
        );
        let cfg_path = dir.path().join("cfg.json");
        fs::write(&cfg_path, text).unwrap();
        let overrides = Overrides {
            seed: Some(9),
            loss: Some(LossKind::Proposed),
            out: Some(PathBuf::from("elsewhere")),
            parallel: true,
        };
        let cfg = ExperimentConfig::load(&cfg_path, &overrides).unwrap();
        assert_eq!(cfg.hyper.seed, 9);
        assert_eq!(cfg.split.seed, 9);
        assert_eq!(cfg.hyper.loss, LossKind::Proposed);
        assert_eq!(cfg.out_dir, PathBuf::from("elsewhere"));
        assert!(cfg.parallel);
    }

    #[test]
    fn missing_dataset_is_a_usage_error_naming_the_path() {
        let cfg: ExperimentConfig =
            serde_json::from_str(r#"{"dataset":{"path":"/no/such/file.tsv"}}"#).unwrap();
        let err = cfg.validate().unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("/no/such/file.tsv"));
    }
}
