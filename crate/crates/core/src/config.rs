// SPDX-License-Identifier: MIT OR Apache-2.0

//! Experiment configuration files.
//!
//! A config is TOML with top-level run metadata and the sections `model`,
//! `data`, `target`, `spd` and `eval`. Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{DistributionSpec, LabelFn};
use crate::error::{Error, Result};
use crate::models::{ResidualMlpModel, TargetModel, TmsModel};
use crate::rng::{stream, Purpose};
use crate::spd::SpdConfig;
use crate::train::TargetTrainSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    #[serde(default)]
    pub description: String,
    /// Marks presets that shrink a published setup to fit a small budget.
    #[serde(default)]
    pub scaled_down: bool,
    pub seeds: Vec<u64>,
    pub model: ModelSpec,
    pub data: DataSpec,
    pub target: TargetTrainSpec,
    pub spd: SpdConfig,
    #[serde(default)]
    pub eval: EvalSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSpec {
    Tms {
        n_features: usize,
        n_hidden: usize,
        #[serde(default)]
        hidden_identity: bool,
    },
    ResidualMlp {
        n_features: usize,
        d_resid: usize,
        n_layers: usize,
        neurons_per_layer: usize,
    },
}

impl ModelSpec {
    pub fn n_features(&self) -> usize {
        match *self {
            ModelSpec::Tms { n_features, .. } | ModelSpec::ResidualMlp { n_features, .. } => {
                n_features
            }
        }
    }

    /// Freshly initialized target model.
    pub fn build(&self, seed: u64) -> TargetModel {
        let mut rng = stream(seed, 0, Purpose::TargetInit);
        match *self {
            ModelSpec::Tms {
                n_features,
                n_hidden,
                hidden_identity,
            } => TargetModel::Tms(TmsModel::new(
                n_features,
                n_hidden,
                hidden_identity,
                &mut rng,
            )),
            ModelSpec::ResidualMlp {
                n_features,
                d_resid,
                n_layers,
                neurons_per_layer,
            } => TargetModel::ResidualMlp(ResidualMlpModel::new(
                n_features,
                d_resid,
                n_layers,
                neurons_per_layer,
                &mut rng,
            )),
        }
    }

    /// Whether `model` has the architecture described here.
    pub fn matches(&self, model: &TargetModel) -> bool {
        match (self, model) {
            (
                ModelSpec::Tms {
                    n_features,
                    n_hidden,
                    hidden_identity,
                },
                TargetModel::Tms(m),
            ) => {
                m.n_features() == *n_features
                    && m.n_hidden() == *n_hidden
                    && m.identity.is_some() == *hidden_identity
            }
            (
                ModelSpec::ResidualMlp {
                    n_features,
                    d_resid,
                    n_layers,
                    neurons_per_layer,
                },
                TargetModel::ResidualMlp(m),
            ) => {
                m.n_features() == *n_features
                    && m.d_resid() == *d_resid
                    && m.blocks.len() == *n_layers
                    && m.blocks.iter().all(|b| b.w_in.rows() == *neurons_per_layer)
            }
            _ => false,
        }
    }

    fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: usize| {
            if v == 0 {
                Err(Error::config(format!("model.{field}"), "must be positive"))
            } else {
                Ok(())
            }
        };
        match *self {
            ModelSpec::Tms {
                n_features,
                n_hidden,
                ..
            } => {
                positive("n_features", n_features)?;
                positive("n_hidden", n_hidden)
            }
            ModelSpec::ResidualMlp {
                n_features,
                d_resid,
                n_layers,
                neurons_per_layer,
            } => {
                positive("n_features", n_features)?;
                positive("d_resid", d_resid)?;
                positive("neurons_per_layer", neurons_per_layer)?;
                if !(1..=3).contains(&n_layers) {
                    return Err(Error::config(
                        "model.n_layers",
                        format!("must be 1, 2 or 3, got {n_layers}"),
                    ));
                }
                Ok(())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    pub feature_prob: f64,
    /// Defaults to 0 for TMS and −1 for residual MLPs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value_min: Option<f64>,
    /// Defaults to 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value_max: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    /// Value of the hot coordinate in one-hot probes.
    #[serde(default = "default_probe")]
    pub probe_magnitude: f64,
    /// Relative norm below which a subcomponent counts as negligible.
    #[serde(default = "default_threshold")]
    pub negligible_threshold: f64,
    /// Samples used for the held-out loss evaluation.
    #[serde(default = "default_eval_batch")]
    pub batch_size: usize,
}

fn default_probe() -> f64 {
    0.75
}
fn default_threshold() -> f64 {
    0.01
}
fn default_eval_batch() -> usize {
    4096
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            probe_magnitude: default_probe(),
            negligible_threshold: default_threshold(),
            batch_size: default_eval_batch(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn distribution(&self) -> DistributionSpec {
        let n = self.model.n_features();
        let base = match self.model {
            ModelSpec::Tms { .. } => DistributionSpec::tms(n, self.data.feature_prob),
            ModelSpec::ResidualMlp { .. } => DistributionSpec::residual(n, self.data.feature_prob),
        };
        DistributionSpec {
            value_min: self.data.value_min.unwrap_or(base.value_min),
            value_max: self.data.value_max.unwrap_or(base.value_max),
            ..base
        }
    }

    pub fn label_fn(&self) -> LabelFn {
        self.distribution().label
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::config("name", "must not be empty"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "list at least one seed"));
        }
        self.model.validate()?;
        let p = self.data.feature_prob;
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::config(
                "data.feature_prob",
                format!("must lie in (0, 1], got {p}"),
            ));
        }
        self.distribution().validate()?;
        self.target.validate()?;
        self.spd.validate()?;
        if !(self.eval.probe_magnitude.is_finite() && self.eval.probe_magnitude != 0.0) {
            return Err(Error::config(
                "eval.probe_magnitude",
                "must be finite and nonzero",
            ));
        }
        let d = self.distribution();
        if self.eval.probe_magnitude < d.value_min || self.eval.probe_magnitude > d.value_max {
            return Err(Error::config(
                "eval.probe_magnitude",
                format!(
                    "must lie in the data range [{}, {}]",
                    d.value_min, d.value_max
                ),
            ));
        }
        if !(self.eval.negligible_threshold > 0.0 && self.eval.negligible_threshold < 1.0) {
            return Err(Error::config(
                "eval.negligible_threshold",
                "must lie in (0, 1)",
            ));
        }
        if self.eval.batch_size == 0 {
            return Err(Error::config("eval.batch_size", "must be positive"));
        }
        Ok(())
    }

    /// Non-fatal hyperparameter advice.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        let s = &self.spd;
        if s.n_subcomponents < self.model.n_features() {
            w.push(format!(
                "spd.n_subcomponents ({}) is below the number of features ({}); mechanisms may be merged",
                s.n_subcomponents,
                self.model.n_features()
            ));
        }
        if s.beta1 == 0.0 && s.beta2 == 0.0 {
            w.push(
                "spd.beta1 and spd.beta2 are both 0; nothing ties the masks to the model output"
                    .into(),
            );
        }
        if s.beta3 > 0.1 {
            w.push(format!(
                "spd.beta3 = {} is large; if few importances reach 1 after training, lower it",
                s.beta3
            ));
        }
        if s.n_samples > 1 {
            w.push(format!(
                "spd.n_samples = {}; a single sample is usually sufficient",
                s.n_samples
            ));
        }
        if s.steps == 0 {
            w.push("spd.steps = 0; the decomposition stays at its initialization".into());
        }
        w
    }
}
