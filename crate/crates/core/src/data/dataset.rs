use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{streams, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Mnist,
    Fmnist,
    Synthetic,
    Custom,
}

/// Features in `[0, 1]` (one row per example) with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    class_count: usize,
    provenance: Provenance,
}

/// A gathered minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl LabeledDataset {
    pub fn new(
        features: Array2<f64>,
        labels: Vec<usize>,
        class_count: usize,
        provenance: Provenance,
    ) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::InvalidArgument("dataset must contain at least one example".into()));
        }
        if features.nrows() != labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        if features.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidArgument("feature values must lie in [0, 1]".into()));
        }
        Ok(Self {
            features,
            labels,
            class_count,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    /// Widens (or checks) the label range, e.g. to match an architecture's
    /// output width when a subset misses some classes.
    pub fn with_class_count(mut self, class_count: usize) -> Result<Self> {
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= class_count) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        self.class_count = class_count;
        Ok(self)
    }

    pub fn with_provenance(mut self, provenance: Provenance) -> Self {
        self.provenance = provenance;
        self
    }

    /// First `n` examples (all of them if `n >= len`).
    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.len()).max(1);
        Self {
            features: self.features.slice(ndarray::s![..n, ..]).to_owned(),
            labels: self.labels[..n].to_vec(),
            class_count: self.class_count,
            provenance: self.provenance,
        }
    }

    pub fn gather(&self, indices: &[usize]) -> Batch {
        Batch {
            inputs: self.features.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn all(&self) -> Batch {
        Batch {
            inputs: self.features.clone(),
            labels: self.labels.clone(),
        }
    }
}

/// One epoch's minibatches: a permutation of `0..n` seeded by `(seed, epoch)`,
/// cut into chunks of `batch_size` with the remainder as a final short batch.
pub fn batches(
    dataset: &LabeledDataset,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<usize>>> {
    let n = dataset.len();
    if batch_size == 0 || batch_size > n {
        return Err(Error::InvalidArgument(format!(
            "batch size must lie in 1..={n}, got {batch_size}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = Stream::with_id(seed, (streams::BATCHES << 32) | epoch);
    order.shuffle(rng.rng());
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}
