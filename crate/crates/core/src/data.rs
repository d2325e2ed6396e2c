// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sparse synthetic feature distributions.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::activation::relu;
use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

/// How labels are derived from inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelFn {
    /// `y = x` (autoencoding, as in TMS).
    Identity,
    /// `y_i = x_i + ReLU(x_i)`.
    ResidualRelu,
}

impl LabelFn {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            LabelFn::Identity => x,
            LabelFn::ResidualRelu => x + relu(x),
        }
    }
}

/// Each entry is independently nonzero with probability `feature_prob`, and
/// nonzero values are uniform on `[value_min, value_max]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionSpec {
    pub n_features: usize,
    pub feature_prob: f64,
    pub value_min: f64,
    pub value_max: f64,
    pub label: LabelFn,
}

impl DistributionSpec {
    pub fn tms(n_features: usize, feature_prob: f64) -> Self {
        Self {
            n_features,
            feature_prob,
            value_min: 0.0,
            value_max: 1.0,
            label: LabelFn::Identity,
        }
    }

    pub fn residual(n_features: usize, feature_prob: f64) -> Self {
        Self {
            n_features,
            feature_prob,
            value_min: -1.0,
            value_max: 1.0,
            label: LabelFn::ResidualRelu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.feature_prob) {
            return Err(Error::config(
                "data.feature_prob",
                format!("must lie in [0, 1], got {}", self.feature_prob),
            ));
        }
        if !(self.value_min.is_finite() && self.value_max.is_finite())
            || self.value_min > self.value_max
        {
            return Err(Error::config(
                "data.value_min",
                format!("bad range [{}, {}]", self.value_min, self.value_max),
            ));
        }
        if self.n_features == 0 {
            return Err(Error::config("model.n_features", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SparseFeatureBatch {
    pub inputs: DenseMatrix,
    pub labels: DenseMatrix,
}

impl SparseFeatureBatch {
    pub fn batch_size(&self) -> usize {
        self.inputs.rows()
    }
}

/// Draws a `batch × n_features` sample.
pub fn sample_batch<R: Rng>(
    spec: &DistributionSpec,
    batch: usize,
    rng: &mut R,
) -> Result<SparseFeatureBatch> {
    spec.validate()?;
    if batch == 0 {
        return Err(Error::InvalidArgument(
            "batch size must be at least 1".into(),
        ));
    }
    let width = spec.value_max - spec.value_min;
    let mut inputs = DenseMatrix::zeros(batch, spec.n_features);
    for v in inputs.data_mut() {
        if rng.random::<f64>() < spec.feature_prob {
            let mut x = spec.value_min + width * rng.random::<f64>();
            // Keep sampled features nonzero even on ranges that include 0.
            while x == 0.0 && width > 0.0 {
                x = spec.value_min + width * rng.random::<f64>();
            }
            *v = x;
        }
    }
    let labels = inputs.map(|x| spec.label.apply(x));
    Ok(SparseFeatureBatch { inputs, labels })
}

/// `n_features` one-hot rows with value `magnitude` on the diagonal.
pub fn one_hot_probes(n_features: usize, magnitude: f64) -> DenseMatrix {
    let mut m = DenseMatrix::zeros(n_features, n_features);
    for i in 0..n_features {
        m.set(i, i, magnitude);
    }
    m
}
