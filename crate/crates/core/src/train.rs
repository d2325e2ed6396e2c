// SPDX-License-Identifier: MIT OR Apache-2.0

//! Target-model training.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{sample_batch, DistributionSpec};
use crate::error::{Error, Result};
use crate::models::{BoundModel, TargetModel};
use crate::optim::{Optimizer, OptimizerSpec};
use crate::rng::{stream, Purpose};
use crate::tensor::DenseMatrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetTrainSpec {
    pub steps: u64,
    pub batch_size: usize,
    pub optimizer: OptimizerSpec,
    /// Expected upper bound on the final loss (mean of the last 100 steps).
    /// Exceeding it is reported as a warning, not an error.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_ceiling: Option<f64>,
}

impl TargetTrainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("target.batch_size", "must be positive"));
        }
        if let Some(c) = self.loss_ceiling {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::config(
                    "target.loss_ceiling",
                    "must be finite and positive",
                ));
            }
        }
        self.optimizer.validate("target.optimizer")
    }
}

/// Per-step training loss.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossCurve {
    pub losses: Vec<f64>,
}

impl LossCurve {
    pub fn first(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    pub fn last(&self) -> Option<f64> {
        self.losses.last().copied()
    }

    /// Mean of the last `n` entries.
    pub fn tail_mean(&self, n: usize) -> Option<f64> {
        let n = n.min(self.losses.len());
        (n > 0).then(|| self.losses[self.losses.len() - n..].iter().sum::<f64>() / n as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            s.push_str(&format!("{i},{l:e}\n"));
        }
        s
    }
}

/// Trains the non-frozen parameters of `model` in place to minimize the MSE
/// between model outputs and labels. Frozen matrices (the residual
/// embedding and the TMS hidden identity) are never touched.
///
/// `progress` is called after each step with `(step, loss)`.
pub fn train_target(
    model: &mut TargetModel,
    data: &DistributionSpec,
    spec: &TargetTrainSpec,
    seed: u64,
    mut progress: impl FnMut(u64, f64),
) -> Result<LossCurve> {
    spec.validate()?;
    data.validate()?;
    if data.n_features != model.n_features() {
        return Err(Error::config(
            "data.n_features",
            format!(
                "{} but model has {} features",
                data.n_features,
                model.n_features()
            ),
        ));
    }
    let shapes: Vec<_> = model.trainable().iter().map(|m| m.shape()).collect();
    let mut opt = Optimizer::new(spec.optimizer.clone(), spec.steps, &shapes);
    let mut curve = LossCurve::default();

    for step in 0..spec.steps {
        let batch = sample_batch(
            data,
            spec.batch_size,
            &mut stream(seed, step, Purpose::TargetData),
        )?;
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, true);
        let weights = model.dense_weights(&bound);
        let x = tape.constant(batch.inputs);
        let y = tape.constant(batch.labels);
        let diverged =
            |e: Error| Error::Numerical(format!("target training diverged at step {step}: {e}"));
        let trace = model
            .forward_with(&mut tape, &bound, x, &weights)
            .map_err(diverged)?;
        let loss = tape.mse(trace.output, y).map_err(diverged)?;
        let loss_value = tape.value(loss).item().unwrap_or(f64::NAN);
        let mut grads = tape.backward(loss)?;

        let leaves = trainable_vars(&bound);
        let grads: Vec<_> = leaves
            .iter()
            .zip(&shapes)
            .map(|(&v, &(r, c))| grads.take(v).unwrap_or_else(|| DenseMatrix::zeros(r, c)))
            .collect();
        opt.update(&mut model.trainable_mut(), &grads)?;
        if let Some(bad) = model.trainable().iter().position(|m| !m.is_finite()) {
            return Err(Error::Numerical(format!(
                "target training produced non-finite parameter #{bad} at step {step} (loss {loss_value:e})"
            )));
        }
        curve.losses.push(loss_value);
        progress(step, loss_value);
    }
    Ok(curve)
}

fn trainable_vars(bound: &BoundModel) -> Vec<Var> {
    match bound {
        BoundModel::Tms { w, b, .. } => vec![*w, *b],
        BoundModel::ResidualMlp { blocks, .. } => {
            blocks.iter().flat_map(|&(a, b, c)| [a, b, c]).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ResidualMlpModel, TmsModel};
    use crate::optim::Schedule;

    #[test]
    fn zero_steps_returns_initialization() {
        let init = TargetModel::Tms(TmsModel::new(
            5,
            2,
            false,
            &mut stream(0, 0, Purpose::TargetInit),
        ));
        let mut model = init.clone();
        let spec = TargetTrainSpec {
            steps: 0,
            batch_size: 8,
            optimizer: OptimizerSpec::adamw(5e-3, Schedule::Constant, 0.01),
            loss_ceiling: None,
        };
        let curve = train_target(
            &mut model,
            &DistributionSpec::tms(5, 0.05),
            &spec,
            0,
            |_, _| {},
        )
        .unwrap();
        assert!(curve.losses.is_empty());
        assert_eq!(model, init);
    }

    #[test]
    fn tms_loss_decreases_and_identity_stays_frozen() {
        let mut model = TargetModel::Tms(TmsModel::new(
            5,
            2,
            true,
            &mut stream(1, 0, Purpose::TargetInit),
        ));
        let spec = TargetTrainSpec {
            steps: 300,
            batch_size: 256,
            optimizer: OptimizerSpec::adamw(5e-3, Schedule::Constant, 0.01),
            loss_ceiling: None,
        };
        let curve = train_target(
            &mut model,
            &DistributionSpec::tms(5, 0.05),
            &spec,
            1,
            |_, _| {},
        )
        .unwrap();
        assert!(curve.tail_mean(20).unwrap() < curve.losses[..20].iter().sum::<f64>() / 20.0);
        let TargetModel::Tms(tms) = &model else {
            unreachable!()
        };
        assert_eq!(tms.identity.as_ref().unwrap(), &DenseMatrix::identity(2));
    }

    #[test]
    fn residual_embedding_is_bit_identical_after_training() {
        let init = ResidualMlpModel::new(8, 16, 2, 3, &mut stream(2, 0, Purpose::TargetInit));
        let embed = init.embed.clone();
        let mut model = TargetModel::ResidualMlp(init);
        let spec = TargetTrainSpec {
            steps: 50,
            batch_size: 64,
            optimizer: OptimizerSpec::adamw(3e-3, Schedule::Cosine, 0.01),
            loss_ceiling: None,
        };
        train_target(
            &mut model,
            &DistributionSpec::residual(8, 0.1),
            &spec,
            2,
            |_, _| {},
        )
        .unwrap();
        let TargetModel::ResidualMlp(m) = &model else {
            unreachable!()
        };
        assert_eq!(m.embed.data(), embed.data());
    }

    #[test]
    fn divergence_is_reported() {
        let mut model = TargetModel::Tms(TmsModel::new(
            5,
            2,
            false,
            &mut stream(3, 0, Purpose::TargetInit),
        ));
        let spec = TargetTrainSpec {
            steps: 50,
            batch_size: 32,
            optimizer: OptimizerSpec::adam(1e300, Schedule::Constant),
            loss_ceiling: None,
        };
        let err = train_target(
            &mut model,
            &DistributionSpec::tms(5, 0.5),
            &spec,
            3,
            |_, _| {},
        )
        .unwrap_err();
        assert!(matches!(err, Error::Numerical(_)), "{err}");
    }
}
