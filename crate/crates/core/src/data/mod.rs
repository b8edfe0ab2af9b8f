//! Datasets, loaders and non-IID federated splits.

mod io;
mod partition;

pub use io::{load_csv, load_idx};
pub use partition::{
    build_federated, client_permutation, partition_concept_shift, partition_feature_skew, partition_label_skew, ShardSplit, ClientData,
    ClientManifest, ExternalSpec, FeatureTransform, FederatedData, Heterogeneity, PartitionManifest, SplitConfig,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::InputShape;

/// Samples stored row-major, one `shape.len()` block per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub shape: InputShape,
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(shape: InputShape, inputs: Vec<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let ds = Dataset {
            shape,
            inputs,
            labels,
            num_classes,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn empty(shape: InputShape, num_classes: usize) -> Self {
        Dataset {
            shape,
            inputs: Vec::new(),
            labels: Vec::new(),
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs.len() != self.labels.len() * self.shape.len() {
            return Err(Error::Shape(format!(
                "{} input values for {} samples of size {}",
                self.inputs.len(),
                self.labels.len(),
                self.shape.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= self.num_classes) {
            return Err(Error::Config(format!(
                "label {bad} outside [0, {})",
                self.num_classes
            )));
        }
        if self.inputs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("dataset contains non-finite inputs".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let n = self.shape.len();
        &self.inputs[i * n..(i + 1) * n]
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut inputs = Vec::with_capacity(indices.len() * self.shape.len());
        for &i in indices {
            inputs.extend_from_slice(self.sample(i));
        }
        Dataset {
            shape: self.shape,
            inputs,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Gathers the inputs and labels of `indices` into one batch.
    pub fn batch(&self, indices: &[usize]) -> (Vec<f64>, Vec<usize>) {
        let sub = self.subset(indices);
        (sub.inputs, sub.labels)
    }
}

/// Gaussian class clusters for desk-scale experiments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub dims: usize,
    pub per_class: usize,
    /// Standard deviation of each cluster around its mean.
    pub spread: f64,
}

/// Class means are drawn uniformly from `[0.2, 0.8]^dims`; samples add
/// isotropic Gaussian noise of scale `spread` and are clamped to `[0, 1]`.
pub fn synth_generate(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    if spec.num_classes < 2 || spec.dims == 0 || spec.per_class == 0 || spec.spread < 0.0 {
        return Err(Error::Config(format!("invalid synthetic dataset spec {spec:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| (0..spec.dims).map(|_| rng.random_range(0.2..0.8)).collect())
        .collect();
    let n = spec.num_classes * spec.per_class;
    let mut inputs = Vec::with_capacity(n * spec.dims);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..spec.per_class {
        for (class, mean) in means.iter().enumerate() {
            for &m in mean {
                let noise: f64 = rng.sample(StandardNormal);
                inputs.push((m + spec.spread * noise).clamp(0.0, 1.0));
            }
            labels.push(class);
        }
    }
    Dataset::new(
        InputShape::Flat { features: spec.dims },
        inputs,
        labels,
        spec.num_classes,
    )
}
