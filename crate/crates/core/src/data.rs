//! Labeled datasets, CSV ingestion, the Gaussian-mixture generator and
//! seeded train/test splits.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::linalg::{norm2, Matrix};

/// Name of the label column in dataset CSV files.
pub const LABEL_COLUMN: &str = "label";

/// Feature rows with class labels in `0..num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::InvalidInput(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidInput(format!(
                "label {bad} outside 0..{num_classes}"
            )));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn x(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn y(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let dim = self.dim();
        let mut data = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            data.extend_from_slice(self.x(i));
        }
        LabeledDataset {
            features: Matrix::from_raw(indices.len(), dim, data),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Reads a CSV with a header row, a `label` column and numeric features.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path)?;
        let headers = reader.headers()?.clone();
        let label_col = headers
            .iter()
            .position(|h| h.trim() == LABEL_COLUMN)
            .ok_or_else(|| {
                Error::InvalidInput(format!("{}: no '{LABEL_COLUMN}' column", path.display()))
            })?;
        let dim = headers.len() - 1;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (line, rec) in reader.records().enumerate() {
            let rec = rec?;
            let at = |msg: String| Error::InvalidInput(format!("{}:{}: {msg}", path.display(), line + 2));
            if rec.len() != headers.len() {
                return Err(at(format!("expected {} fields, got {}", headers.len(), rec.len())));
            }
            for (j, field) in rec.iter().enumerate() {
                let field = field.trim();
                if j == label_col {
                    labels.push(
                        field
                            .parse::<usize>()
                            .map_err(|_| at(format!("bad label '{field}'")))?,
                    );
                } else {
                    let x: f64 = field
                        .parse()
                        .map_err(|_| at(format!("bad number '{field}'")))?;
                    if !x.is_finite() {
                        return Err(at(format!("non-finite value '{field}'")));
                    }
                    data.push(x);
                }
            }
        }
        let num_classes = labels.iter().max().map_or(0, |m| m + 1);
        Self::new(Matrix::new(labels.len(), dim, data)?, labels, num_classes)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec![LABEL_COLUMN.to_string()];
        header.extend((0..self.dim()).map(|j| format!("x{j}")));
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec = vec![self.labels[i].to_string()];
            rec.extend(self.x(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Parameters of the Gaussian-mixture generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub dim: usize,
    pub n: usize,
    /// Norm of each class mean.
    pub separation: f64,
    /// Per-coordinate standard deviation around the class mean.
    pub noise: f64,
    pub seed: u64,
}

/// Isotropic Gaussian clusters around random class means of norm
/// `separation`. Labels are balanced to within one example per class.
pub fn gaussian_mixture(spec: &SyntheticSpec) -> Result<LabeledDataset> {
    if spec.classes < 2 || spec.dim == 0 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 classes and 1 dimension (got {} and {})",
            spec.classes, spec.dim
        )));
    }
    if spec.n < spec.classes {
        return Err(Error::InvalidInput(format!(
            "n = {} is smaller than the class count {}",
            spec.n, spec.classes
        )));
    }
    if !(spec.noise >= 0.0 && spec.separation >= 0.0) {
        return Err(Error::InvalidInput("noise and separation must be nonnegative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut gauss = || -> f64 { StandardNormal.sample(&mut rng) };
    let means: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            let z: Vec<f64> = (0..spec.dim).map(|_| gauss()).collect();
            let n = norm2(&z).max(f64::MIN_POSITIVE);
            z.iter().map(|x| x * spec.separation / n).collect()
        })
        .collect();
    let mut labels: Vec<usize> = (0..spec.n).map(|i| i % spec.classes).collect();
    let mut data = Vec::with_capacity(spec.n * spec.dim);
    for &y in &labels {
        for mu in &means[y] {
            data.push(mu + spec.noise * gauss());
        }
    }
    // shuffle rows with a separate stream so the draws above stay put
    let mut order: Vec<usize> = (0..spec.n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_5eed));
    let mut shuffled = Vec::with_capacity(data.len());
    for &i in &order {
        shuffled.extend_from_slice(&data[i * spec.dim..(i + 1) * spec.dim]);
    }
    labels = order.iter().map(|&i| labels[i]).collect();
    LabeledDataset::new(Matrix::new(spec.n, spec.dim, shuffled)?, labels, spec.classes)
}

/// Seeded disjoint train/test index sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    pub fn new(n: usize, train_fraction: f64, test_fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&train_fraction)
            || !(0.0..=1.0).contains(&test_fraction)
            || train_fraction + test_fraction > 1.0 + 1e-12
        {
            return Err(Error::Config(format!(
                "train_fraction {train_fraction} and test_fraction {test_fraction} must be in [0,1] and sum to at most 1"
            )));
        }
        let n_train = (n as f64 * train_fraction).round() as usize;
        let n_test = ((n as f64 * test_fraction).round() as usize).min(n - n_train);
        if n_train == 0 {
            return Err(Error::Config("train split is empty".into()));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut train = order[..n_train].to_vec();
        let mut test = order[n_train..n_train + n_test].to_vec();
        train.sort_unstable();
        test.sort_unstable();
        Ok(Self { train, test })
    }

    /// Short hex digest identifying the exact index sets.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (tag, idx) in [(b"train", &self.train), (b"test\0", &self.test)] {
            h.update(tag);
            h.update((idx.len() as u64).to_le_bytes());
            for &i in idx.iter() {
                h.update((i as u64).to_le_bytes());
            }
        }
        h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}
