//! Experiment configuration: a JSON file whose top level carries the run
//! knobs (flattened) plus the dataset source and output options. A
//! minimal config is just `{"omega": 0.1}`; everything else has defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{generate_synthetic, load_csv, LabeledDataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::orchestrate::RunConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetSpec {
    Synthetic(SyntheticSpec),
    Csv {
        train_path: PathBuf,
        test_path: PathBuf,
        label_column: String,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic(SyntheticSpec::default())
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportOptions {
    #[serde(default = "default_true")]
    pub csv: bool,
    #[serde(default = "default_true")]
    pub summary: bool,
}

impl Default for ReportOptions {
    fn default() -> Self {
        ReportOptions {
            csv: true,
            summary: true,
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    #[serde(default)]
    pub dataset: DatasetSpec,
    #[serde(flatten)]
    pub run: RunConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub report: ReportOptions,
}

impl ExperimentSpec {
    pub fn with_omega(omega: f64) -> Self {
        ExperimentSpec {
            dataset: DatasetSpec::default(),
            run: RunConfig::with_omega(omega),
            output_dir: default_output_dir(),
            report: ReportOptions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.run.validate()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ExperimentSpec = serde_json::from_str(text).map_err(|e| Error::Config {
            path: format!("line {}, column {}", e.line(), e.column()),
            message: e.to_string(),
        })?;
        spec.validate()?;
        Ok(spec)
    }

    /// Materialize the configured dataset. Synthetic data derives its seed
    /// from the run seed so a config file fully determines every byte.
    pub fn resolve_dataset(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        match &self.dataset {
            DatasetSpec::Synthetic(spec) => {
                generate_synthetic(spec, self.run.seed.wrapping_add(0x5eed_da7a))
            }
            DatasetSpec::Csv {
                train_path,
                test_path,
                label_column,
            } => {
                let train = load_csv(train_path, label_column)?;
                let test = load_csv(test_path, label_column)?;
                if train.n_features() != test.n_features() {
                    return Err(Error::Config {
                        path: "dataset.csv".to_string(),
                        message: format!(
                            "train has {} features but test has {}",
                            train.n_features(),
                            test.n_features()
                        ),
                    });
                }
                Ok((train, test))
            }
        }
    }
}

/// Load and validate a config file, filling defaults for absent fields.
pub fn load_config(path: &Path) -> Result<ExperimentSpec> {
    let text = std::fs::read_to_string(path)?;
    ExperimentSpec::from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orchestrate::Mode;
    use std::io::Write;

    #[test]
    fn minimal_config_fills_defaults() {
        let spec = ExperimentSpec::from_json(r#"{"omega": 0.1}"#).unwrap();
        assert_eq!(spec.run.omega, 0.1);
        assert_eq!(spec.run.lambda, 1.0);
        assert_eq!(spec.run.alpha, 0.5);
        assert_eq!(spec.run.beta, 0.1);
        assert_eq!(spec.run.mode, Mode::Bmia);
        assert_eq!(spec.output_dir, PathBuf::from("out"));
        assert!(spec.report.csv && spec.report.summary);
    }

    #[test]
    fn out_of_range_omega_is_rejected() {
        let err = ExperimentSpec::from_json(r#"{"omega": 1.5}"#).unwrap_err();
        assert!(matches!(err, Error::Config { path, .. } if path == "omega"));
    }

    #[test]
    fn emitted_defaults_reload_identically() {
        let spec = ExperimentSpec::with_omega(0.25);
        let reloaded = ExperimentSpec::from_json(&spec.to_json()).unwrap();
        assert_eq!(spec, reloaded);
    }

    #[test]
    fn load_config_round_trips_through_a_file() {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        let spec = ExperimentSpec::with_omega(0.1);
        file.write_all(spec.to_json().as_bytes()).unwrap();
        let loaded = load_config(file.path()).unwrap();
        assert_eq!(spec, loaded);
    }

    #[test]
    fn unparseable_json_reports_location() {
        let err = ExperimentSpec::from_json("{omega: oops").unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn synthetic_dataset_resolution_is_deterministic() {
        let spec = ExperimentSpec::from_json(
            r#"{"omega": 0.1, "dataset": {"synthetic": {
                "train_samples": 50, "test_samples": 20, "features": 4,
                "classes": 2, "separation": 2.0}}}"#,
        )
        .unwrap();
        let (a_train, a_test) = spec.resolve_dataset().unwrap();
        let (b_train, b_test) = spec.resolve_dataset().unwrap();
        assert_eq!(a_train, b_train);
        assert_eq!(a_test, b_test);
        assert_eq!(a_train.len(), 50);
        assert_eq!(a_test.len(), 20);
    }

    #[test]
    fn csv_dataset_resolution() {
        let dir = tempfile::tempdir().unwrap();
        let train_path = dir.path().join("train.csv");
        let test_path = dir.path().join("test.csv");
        std::fs::write(&train_path, "a,b,label\n1,2,0\n3,4,1\n").unwrap();
        std::fs::write(&test_path, "a,b,label\n5,6,1\n").unwrap();
        let spec = ExperimentSpec {
            dataset: DatasetSpec::Csv {
                train_path,
                test_path,
                label_column: "label".to_string(),
            },
            ..ExperimentSpec::with_omega(0.5)
        };
        let (train, test) = spec.resolve_dataset().unwrap();
        assert_eq!(train.len(), 2);
        assert_eq!(test.len(), 1);
    }
}
