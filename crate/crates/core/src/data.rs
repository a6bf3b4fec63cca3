//! Datasets: synthetic long-tail generation, CSV ingestion, frequency-based
//! label partitioning and train/test splitting.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("feature file has {features} rows but label file has {labels}")]
    RowCountMismatch { features: usize, labels: usize },
    #[error("label entry at row {row}, column {col} is `{value}`, expected 0 or 1")]
    InvalidLabel { row: usize, col: usize, value: String },
    #[error("feature at row {row}, column {col} is not finite")]
    NonFiniteFeature { row: usize, col: usize },
    #[error("could not parse feature at row {row}, column {col}: `{value}`")]
    InvalidFeature { row: usize, col: usize, value: String },
    #[error("row {row} has {got} columns, expected {expected}")]
    RaggedRow { row: usize, got: usize, expected: usize },
    #[error("label column {col} is degenerate (all {value}) in the {split}")]
    DegenerateColumn { col: usize, value: u8, split: &'static str },
    #[error("dataset is empty")]
    Empty,
    #[error("synthetic config invalid: {0}")]
    InvalidConfig(String),
    #[error("could not tune bias for label column {col} after {attempts} attempts (target prevalence {target})")]
    BiasTuningFailed { col: usize, attempts: usize, target: f64 },
    #[error("partition fraction {fraction} with {labels} labels selects no privileged label")]
    EmptyPartition { fraction: f64, labels: usize },
    #[error("train fraction {0} must lie strictly inside (0, 1)")]
    InvalidTrainFraction(f64),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Feature matrix plus binary label matrix for one corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Real")]
pub struct Dataset<T: Real> {
    features: Vec<Vec<T>>,
    labels: Vec<Vec<u8>>,
    label_names: Vec<String>,
}

impl<T: Real> Dataset<T> {
    /// Validates invariants: equal row counts, finite features, binary labels,
    /// and no degenerate label column.
    pub fn new(
        features: Vec<Vec<T>>,
        labels: Vec<Vec<u8>>,
        label_names: Vec<String>,
    ) -> Result<Self, DataError> {
        if features.is_empty() || labels.is_empty() {
            return Err(DataError::Empty);
        }
        if features.len() != labels.len() {
            return Err(DataError::RowCountMismatch {
                features: features.len(),
                labels: labels.len(),
            });
        }
        let d = features[0].len();
        let t = labels[0].len();
        for (row, f) in features.iter().enumerate() {
            if f.len() != d {
                return Err(DataError::RaggedRow { row, got: f.len(), expected: d });
            }
            for (col, v) in f.iter().enumerate() {
                if !v.is_finite() {
                    return Err(DataError::NonFiniteFeature { row, col });
                }
            }
        }
        for (row, y) in labels.iter().enumerate() {
            if y.len() != t {
                return Err(DataError::RaggedRow { row, got: y.len(), expected: t });
            }
            for (col, v) in y.iter().enumerate() {
                if *v > 1 {
                    return Err(DataError::InvalidLabel {
                        row,
                        col,
                        value: v.to_string(),
                    });
                }
            }
        }
        let ds = Self { features, labels, label_names };
        ds.check_columns("dataset")?;
        Ok(ds)
    }

    fn check_columns(&self, split: &'static str) -> Result<(), DataError> {
        for col in 0..self.n_labels() {
            let pos = self.labels.iter().filter(|y| y[col] == 1).count();
            if pos == 0 {
                return Err(DataError::DegenerateColumn { col, value: 0, split });
            }
            if pos == self.n_instances() {
                return Err(DataError::DegenerateColumn { col, value: 1, split });
            }
        }
        Ok(())
    }

    pub fn n_instances(&self) -> usize {
        self.features.len()
    }

    pub fn n_features(&self) -> usize {
        self.features[0].len()
    }

    pub fn n_labels(&self) -> usize {
        self.labels[0].len()
    }

    pub fn features(&self, i: usize) -> &[T] {
        &self.features[i]
    }

    pub fn labels(&self, i: usize) -> &[u8] {
        &self.labels[i]
    }

    pub fn label_names(&self) -> &[String] {
        &self.label_names
    }

    /// Positive count per label column.
    pub fn label_frequencies(&self) -> Vec<usize> {
        (0..self.n_labels())
            .map(|col| self.labels.iter().filter(|y| y[col] == 1).count())
            .collect()
    }

    /// Deterministic shuffle-then-cut split. The train part must keep every
    /// label column non-degenerate.
    pub fn split(&self, spec: &SplitSpec) -> Result<(Dataset<T>, Dataset<T>), DataError> {
        if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
            return Err(DataError::InvalidTrainFraction(spec.train_fraction));
        }
        let n = self.n_instances();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha20Rng::seed_from_u64(spec.seed);
        // Fisher-Yates, fixed draw order for replayability.
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let n_train = ((spec.train_fraction * n as f64).round() as usize).clamp(1, n - 1);
        let take = |idx: &[usize]| {
            let features = idx.iter().map(|&i| self.features[i].clone()).collect();
            let labels = idx.iter().map(|&i| self.labels[i].clone()).collect();
            Dataset {
                features,
                labels,
                label_names: self.label_names.clone(),
            }
        };
        let train = take(&order[..n_train]);
        let test = take(&order[n_train..]);
        train.check_columns("training split")?;
        Ok((train, test))
    }
}

/// Deterministic train/test split parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

/// Privileged / non-privileged label split by training frequency.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelPartition {
    pub privileged: Vec<usize>,
    pub non_privileged: Vec<usize>,
    pub frequencies: Vec<usize>,
}

impl LabelPartition {
    pub fn is_privileged(&self, label: usize) -> bool {
        self.privileged.binary_search(&label).is_ok()
    }

    /// Everything-in-one-group partition used by the global preference arm.
    pub fn all_privileged(n_labels: usize, frequencies: Vec<usize>) -> Self {
        Self {
            privileged: (0..n_labels).collect(),
            non_privileged: Vec::new(),
            frequencies,
        }
    }
}

/// The `⌈fraction·T⌉` lowest-frequency labels form the privileged set.
/// Ties break toward the lower label index.
pub fn partition_by_frequency<T: Real>(
    dataset: &Dataset<T>,
    fraction: f64,
) -> Result<LabelPartition, DataError> {
    let t = dataset.n_labels();
    let n_priv = (fraction * t as f64).ceil() as usize;
    if !(fraction > 0.0 && fraction < 1.0) || n_priv == 0 {
        return Err(DataError::EmptyPartition { fraction, labels: t });
    }
    let frequencies = dataset.label_frequencies();
    let mut order: Vec<usize> = (0..t).collect();
    order.sort_by_key(|&i| (frequencies[i], i));
    let mut privileged: Vec<usize> = order[..n_priv.min(t)].to_vec();
    let mut non_privileged: Vec<usize> = order[n_priv.min(t)..].to_vec();
    privileged.sort_unstable();
    non_privileged.sort_unstable();
    Ok(LabelPartition { privileged, non_privileged, frequencies })
}

/// Synthetic long-tail generator parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub n_instances: usize,
    pub n_labels: usize,
    pub n_features: usize,
    #[serde(default = "default_base_prevalence")]
    pub base_prevalence: f64,
    #[serde(default = "default_zipf_exponent")]
    pub zipf_exponent: f64,
    #[serde(default = "default_sibling_overlap")]
    pub sibling_overlap: f64,
    pub seed: u64,
}

fn default_base_prevalence() -> f64 {
    0.4
}

fn default_zipf_exponent() -> f64 {
    1.0
}

fn default_sibling_overlap() -> f64 {
    0.7
}

impl SyntheticConfig {
    /// Target positive rate for label `t`: `base · (t+1)^(-zipf_exponent)`.
    pub fn target_prevalence(&self, label: usize) -> f64 {
        self.base_prevalence * ((label + 1) as f64).powf(-self.zipf_exponent)
    }
}

/// Generates a long-tail multi-label dataset from hidden linear teachers.
///
/// Instances are standard-normal feature vectors. Each label has a teacher
/// weight vector; sibling label pairs (2t, 2t+1) share most of their teacher
/// by convex combination so their scores correlate and confusing sets are
/// nonempty. A per-label bias is bisection-tuned so the thresholded positive
/// rate matches the Zipf-decayed target prevalence.
pub fn generate_synthetic<T: Real>(config: &SyntheticConfig) -> Result<Dataset<T>, DataError> {
    if config.n_instances < 50 {
        return Err(DataError::InvalidConfig(format!(
            "n_instances {} < 50",
            config.n_instances
        )));
    }
    if config.n_labels < 6 {
        return Err(DataError::InvalidConfig(format!("n_labels {} < 6", config.n_labels)));
    }
    if config.n_features < 4 {
        return Err(DataError::InvalidConfig(format!(
            "n_features {} < 4",
            config.n_features
        )));
    }
    if !(config.base_prevalence > 0.0 && config.base_prevalence < 1.0) {
        return Err(DataError::InvalidConfig(format!(
            "base_prevalence {} outside (0,1)",
            config.base_prevalence
        )));
    }

    let n = config.n_instances;
    let t = config.n_labels;
    let d = config.n_features;
    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);

    // Draw order is fixed: features first, then teachers, label-major.
    let features: Vec<Vec<T>> = (0..n)
        .map(|_| (0..d).map(|_| T::sample_standard_normal(&mut rng)).collect())
        .collect();

    let raw_teachers: Vec<Vec<f64>> = (0..t)
        .map(|_| (0..d).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)).collect())
        .collect();
    let mut teachers = raw_teachers.clone();
    for label in (1..t).step_by(2) {
        let a = config.sibling_overlap;
        for j in 0..d {
            teachers[label][j] = a * teachers[label - 1][j] + (1.0 - a) * raw_teachers[label][j];
        }
    }

    let mut labels = vec![vec![0u8; t]; n];
    for label in 0..t {
        let scores: Vec<f64> = features
            .iter()
            .map(|z| {
                z.iter()
                    .zip(&teachers[label])
                    .map(|(zi, wi)| zi.to_f64().unwrap() * wi)
                    .sum()
            })
            .collect();
        let target = config.target_prevalence(label);
        let bias = tune_bias(&scores, target, label)?;
        for (i, s) in scores.iter().enumerate() {
            labels[i][label] = u8::from(s + bias > 0.0);
        }
    }

    let label_names = (0..t).map(|i| format!("label_{i:02}")).collect();
    Dataset::new(features, labels, label_names)
}

/// Bisection on the bias so the thresholded positive count approaches
/// `target · N`. Each retry clamps the target count further inside `[1, N-1]`
/// so a degenerate column is never produced silently.
fn tune_bias(scores: &[f64], target: f64, col: usize) -> Result<f64, DataError> {
    let n = scores.len();
    let count_at = |b: f64| scores.iter().filter(|&&s| s + b > 0.0).count();
    let max_s = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min_s = scores.iter().cloned().fold(f64::INFINITY, f64::min);

    let mut target_count = target * n as f64;
    for attempt in 0..10 {
        let mut lo = -max_s - 1.0; // count 0
        let mut hi = -min_s + 1.0; // count n
        let mut best = lo;
        let mut best_err = f64::INFINITY;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let c = count_at(mid) as f64;
            let err = (c - target_count).abs();
            if err < best_err && c > 0.0 && c < n as f64 {
                best_err = err;
                best = mid;
            }
            if c < target_count {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let c = count_at(best);
        if c > 0 && c < n {
            return Ok(best);
        }
        // Pull the target toward the interior and try again.
        target_count = target_count.clamp(1.0 + attempt as f64, (n - 1 - attempt) as f64);
    }
    Err(DataError::BiasTuningFailed { col, attempts: 10, target })
}

/// Writes `features.csv` and `labels.csv` (no header) under `dir`.
pub fn write_dataset<T: Real>(dataset: &Dataset<T>, dir: &Path) -> Result<(), DataError> {
    let io_err = |path: &Path, source| DataError::Io {
        path: path.display().to_string(),
        source,
    };
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let write_rows = |path: &Path, rows: Vec<String>| -> Result<(), DataError> {
        let mut buf = String::new();
        for row in rows {
            buf.push_str(&row);
            buf.push('\n');
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
        f.write_all(buf.as_bytes()).map_err(|e| io_err(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| io_err(path, e))?;
        Ok(())
    };
    let feature_rows = (0..dataset.n_instances())
        .map(|i| {
            dataset
                .features(i)
                .iter()
                .map(|v| format!("{v}"))
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect();
    write_rows(&dir.join("features.csv"), feature_rows)?;
    let label_rows = (0..dataset.n_instances())
        .map(|i| {
            dataset
                .labels(i)
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect();
    write_rows(&dir.join("labels.csv"), label_rows)?;
    Ok(())
}

/// Loads the CSV pair written by [`write_dataset`].
pub fn load_dataset<T: Real>(
    features_path: &Path,
    labels_path: &Path,
) -> Result<Dataset<T>, DataError> {
    let read = |path: &Path| -> Result<String, DataError> {
        fs::read_to_string(path).map_err(|e| DataError::Io {
            path: path.display().to_string(),
            source: e,
        })
    };
    let feature_text = read(features_path)?;
    let label_text = read(labels_path)?;

    let mut features: Vec<Vec<T>> = Vec::new();
    for (row, line) in feature_text.lines().enumerate() {
        let mut vals = Vec::new();
        for (col, field) in line.split(',').enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| DataError::InvalidFeature {
                row,
                col,
                value: field.to_string(),
            })?;
            if !v.is_finite() {
                return Err(DataError::NonFiniteFeature { row, col });
            }
            vals.push(T::from_f64_lossy(v));
        }
        features.push(vals);
    }

    let mut labels: Vec<Vec<u8>> = Vec::new();
    for (row, line) in label_text.lines().enumerate() {
        let mut vals = Vec::new();
        for (col, field) in line.split(',').enumerate() {
            match field.trim() {
                "0" => vals.push(0),
                "1" => vals.push(1),
                other => {
                    return Err(DataError::InvalidLabel {
                        row,
                        col,
                        value: other.to_string(),
                    })
                }
            }
        }
        labels.push(vals);
    }

    let t = labels.first().map_or(0, Vec::len);
    let label_names = (0..t).map(|i| format!("label_{i:02}")).collect();
    Dataset::new(features, labels, label_names)
}
