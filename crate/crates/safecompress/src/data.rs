//! Labeled datasets: in-memory layout, synthetic Gaussian clusters, and
//! CSV ingestion.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Feature matrix (row per sample) with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Vec<f64>,
    labels: Vec<usize>,
    n_features: usize,
    class_count: usize,
}

impl LabeledDataset {
    pub fn new(
        features: Vec<f64>,
        labels: Vec<usize>,
        n_features: usize,
        class_count: usize,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if features.len() != labels.len() * n_features {
            return Err(Error::ShapeMismatch {
                op: "dataset_new",
                detail: format!(
                    "{} feature values for {} samples x {} features",
                    features.len(),
                    labels.len(),
                    n_features
                ),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::LabelOutOfRange {
                label: bad,
                classes: class_count,
            });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "dataset_new" });
        }
        Ok(LabeledDataset {
            features,
            labels,
            n_features,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Flat row-major feature block for a set of sample indices.
    pub fn gather_features(&self, indices: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(indices.len() * self.n_features);
        for &i in indices {
            out.extend_from_slice(self.feature_row(i));
        }
        out
    }

    pub fn gather_labels(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// Owned subset in index order.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            features: self.gather_features(indices),
            labels: self.gather_labels(indices),
            n_features: self.n_features,
            class_count: self.class_count,
        }
    }
}

/// Parameters of the synthetic Gaussian-cluster generator. The separation
/// knob scales the distance between class means relative to the noise, so
/// low values force the memorization-prone regime and high values give an
/// easily learnable task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub train_samples: usize,
    pub test_samples: usize,
    pub features: usize,
    pub classes: usize,
    pub separation: f64,
    #[serde(default = "default_noise")]
    pub noise_std: f64,
    /// Class proportions; uniform when omitted. Counts are made exact by
    /// largest-remainder allocation.
    #[serde(default)]
    pub class_priors: Option<Vec<f64>>,
}

fn default_noise() -> f64 {
    1.0
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            train_samples: 400,
            test_samples: 800,
            features: 16,
            classes: 4,
            separation: 2.0,
            noise_std: 1.0,
            class_priors: None,
        }
    }
}

fn exact_class_counts(n: usize, priors: &[f64]) -> Vec<usize> {
    let mut counts: Vec<usize> = priors
        .iter()
        .map(|p| (p * n as f64).floor() as usize)
        .collect();
    let mut remainders: Vec<(f64, usize)> = priors
        .iter()
        .enumerate()
        .map(|(i, p)| (p * n as f64 - counts[i] as f64, i))
        .collect();
    remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let assigned: usize = counts.iter().sum();
    for &(_, i) in remainders.iter().take(n - assigned) {
        counts[i] += 1;
    }
    counts
}

/// Generate train/test Gaussian-cluster datasets. Class means are seeded
/// random directions scaled by `separation`; both splits share the means.
pub fn generate_synthetic(
    spec: &SyntheticSpec,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if spec.classes < 2 {
        return Err(Error::Config {
            path: "dataset.synthetic.classes".to_string(),
            message: "need at least 2 classes".to_string(),
        });
    }
    if spec.noise_std <= 0.0 || !spec.noise_std.is_finite() {
        return Err(Error::Config {
            path: "dataset.synthetic.noise_std".to_string(),
            message: format!("degenerate covariance: noise_std = {}", spec.noise_std),
        });
    }
    if let Some(priors) = &spec.class_priors {
        if priors.len() != spec.classes
            || priors.iter().any(|p| *p < 0.0)
            || (priors.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::Config {
                path: "dataset.synthetic.class_priors".to_string(),
                message: "priors must be non-negative and sum to 1".to_string(),
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit = Normal::new(0.0, 1.0).expect("valid normal");

    // Shared class means: random directions scaled to `separation`.
    let mut means = vec![0.0; spec.classes * spec.features];
    for c in 0..spec.classes {
        let row = &mut means[c * spec.features..(c + 1) * spec.features];
        for v in row.iter_mut() {
            *v = unit.sample(&mut rng);
        }
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        for v in row.iter_mut() {
            *v *= spec.separation / norm;
        }
    }

    let uniform = vec![1.0 / spec.classes as f64; spec.classes];
    let priors = spec.class_priors.as_deref().unwrap_or(&uniform);
    let noise = Normal::new(0.0, spec.noise_std).expect("checked above");

    let draw = |n: usize, rng: &mut ChaCha8Rng| -> LabeledDataset {
        let counts = exact_class_counts(n, priors);
        let mut features = Vec::with_capacity(n * spec.features);
        let mut labels = Vec::with_capacity(n);
        for (c, &count) in counts.iter().enumerate() {
            for _ in 0..count {
                let mean = &means[c * spec.features..(c + 1) * spec.features];
                for &m in mean {
                    features.push(m + noise.sample(rng));
                }
                labels.push(c);
            }
        }
        // Interleave classes deterministically so minibatches stay mixed.
        let mut order: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        order.shuffle(rng);
        let ds = LabeledDataset {
            features,
            labels,
            n_features: spec.features,
            class_count: spec.classes,
        };
        ds.subset(&order)
    };

    let train = draw(spec.train_samples, &mut rng);
    let test = draw(spec.test_samples, &mut rng);
    Ok((train, test))
}

/// Load a CSV with a header row into a dataset. Every non-label column is
/// a numeric feature; the label column must hold non-negative integers.
pub fn load_csv(path: &Path, label_column: &str) -> Result<LabeledDataset> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Csv(e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Csv(e.to_string()))?
        .clone();
    let label_idx = headers
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| {
            Error::Csv(format!(
                "label column `{}` not found; available columns: {}",
                label_column,
                headers.iter().collect::<Vec<_>>().join(", ")
            ))
        })?;

    let mut features = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Csv(e.to_string()))?;
        for (col_idx, cell) in record.iter().enumerate() {
            if col_idx == label_idx {
                let value: f64 = cell.trim().parse().map_err(|_| Error::CsvCell {
                    row: row_idx + 2, // header is row 1
                    column: headers[col_idx].to_string(),
                    message: format!("label `{}` is not numeric", cell),
                })?;
                if value < 0.0 || value.fract() != 0.0 {
                    return Err(Error::CsvCell {
                        row: row_idx + 2,
                        column: headers[col_idx].to_string(),
                        message: format!("label `{}` is not a non-negative integer", cell),
                    });
                }
                labels.push(value as usize);
            } else {
                let value: f64 = cell.trim().parse().map_err(|_| Error::CsvCell {
                    row: row_idx + 2,
                    column: headers[col_idx].to_string(),
                    message: format!("cell `{}` is not numeric", cell),
                })?;
                features.push(value);
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let class_count = labels.iter().max().copied().unwrap_or(0) + 1;
    LabeledDataset::new(features, labels, headers.len() - 1, class_count)
}
