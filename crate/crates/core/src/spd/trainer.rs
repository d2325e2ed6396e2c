// SPDX-License-Identifier: MIT OR Apache-2.0

use super::{
    build_spd_loss, draw_uniforms, BoundDecomposition, Decomposition, SpdConfig, SpdLossBreakdown,
    SpdLossVars,
};
use crate::autodiff::{Tape, Var};
use crate::data::{sample_batch, DistributionSpec};
use crate::error::{Error, Result};
use crate::models::TargetModel;
use crate::optim::Optimizer;
use crate::rng::{stream, Purpose};
use crate::tensor::DenseMatrix;

pub const LOSS_CSV_HEADER: &str = "step,faithfulness,stochastic_recon,layerwise,importance,total";

impl SpdLossBreakdown {
    pub fn csv_row(&self, step: u64) -> String {
        format!(
            "{step},{:e},{:e},{:e},{:e},{:e}",
            self.faithfulness,
            self.stochastic_recon,
            self.stochastic_recon_layerwise,
            self.importance_minimality,
            self.total
        )
    }
}

fn assemble(
    tape: &mut Tape,
    target: &TargetModel,
    dec: &Decomposition,
    cfg: &SpdConfig,
    x: &DenseMatrix,
    seed: u64,
    step: u64,
) -> Result<(BoundDecomposition, SpdLossVars)> {
    let (target_out, acts) = target.forward_capture(x)?;
    let tb = target.bind(tape, false);
    let bd = dec.bind(tape, true);
    let xv = tape.constant(x.clone());
    let yv = tape.constant(target_out);
    let av: Vec<Var> = acts.into_iter().map(|a| tape.constant(a)).collect();
    let shapes: Vec<_> = dec
        .components
        .u
        .iter()
        .map(|u| (x.rows(), u.cols()))
        .collect();
    let uniforms: Vec<Vec<DenseMatrix>> = (0..cfg.n_samples)
        .map(|s| draw_uniforms(seed, step, s as u32, &shapes))
        .collect();
    let loss = build_spd_loss(tape, target, &tb, xv, yv, &av, &bd, cfg, &uniforms)?;
    Ok((bd, loss))
}

/// Loss values of `dec` on `x` without updating anything.
pub fn spd_loss_breakdown(
    target: &TargetModel,
    dec: &Decomposition,
    cfg: &SpdConfig,
    x: &DenseMatrix,
    seed: u64,
    step: u64,
) -> Result<SpdLossBreakdown> {
    let mut tape = Tape::new();
    let (_, loss) = assemble(&mut tape, target, dec, cfg, x, seed, step)?;
    Ok(loss.breakdown(&tape, cfg))
}

/// One optimizer update of `dec` on inputs `x`. Mask uniforms are keyed by
/// `(seed, step)`.
pub fn spd_train_step(
    target: &TargetModel,
    dec: &mut Decomposition,
    opt: &mut Optimizer,
    cfg: &SpdConfig,
    x: &DenseMatrix,
    seed: u64,
    step: u64,
) -> Result<SpdLossBreakdown> {
    let at_step = |e: Error| match e {
        Error::Numerical(msg) => Error::Numerical(format!("SPD step {step}: {msg}")),
        other => other,
    };
    let mut tape = Tape::new();
    let (bd, loss) = assemble(&mut tape, target, dec, cfg, x, seed, step).map_err(at_step)?;
    let breakdown = loss.breakdown(&tape, cfg);
    if !breakdown.is_finite() {
        return Err(Error::Numerical(format!(
            "SPD step {step}: non-finite loss ({breakdown})"
        )));
    }
    let mut grads = tape.backward(loss.total)?;
    let params = dec.params();
    let grads: Vec<DenseMatrix> = bd
        .vars()
        .into_iter()
        .zip(params.iter())
        .map(|(v, p)| {
            grads
                .take(v)
                .unwrap_or_else(|| DenseMatrix::zeros(p.rows(), p.cols()))
        })
        .collect();
    opt.update(&mut dec.params_mut(), &grads)?;
    if let Some(i) = dec.params().iter().position(|p| !p.is_finite()) {
        return Err(Error::Numerical(format!(
            "SPD step {step}: parameter #{i} became non-finite after the update (loss before: {breakdown})"
        )));
    }
    Ok(breakdown)
}

/// Owns a decomposition in training and its optimizer state.
#[derive(Clone, Debug)]
pub struct SpdTrainer {
    pub target: TargetModel,
    pub decomposition: Decomposition,
    pub config: SpdConfig,
    pub data: DistributionSpec,
    pub seed: u64,
    optimizer: Optimizer,
    step: u64,
}

impl SpdTrainer {
    pub fn new(
        target: TargetModel,
        config: SpdConfig,
        data: DistributionSpec,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        data.validate()?;
        if data.n_features != target.n_features() {
            return Err(Error::config(
                "data.n_features",
                format!(
                    "{} but the target has {} features",
                    data.n_features,
                    target.n_features()
                ),
            ));
        }
        let decomposition =
            Decomposition::init(&target, config.n_subcomponents, config.d_gate, seed);
        Self::with_decomposition(target, decomposition, config, data, seed)
    }

    pub fn with_decomposition(
        target: TargetModel,
        decomposition: Decomposition,
        config: SpdConfig,
        data: DistributionSpec,
        seed: u64,
    ) -> Result<Self> {
        decomposition.check_compatible(&target)?;
        let shapes: Vec<_> = decomposition.params().iter().map(|p| p.shape()).collect();
        let optimizer = Optimizer::new(config.optimizer.clone(), config.steps, &shapes);
        Ok(Self {
            target,
            decomposition,
            config,
            data,
            seed,
            optimizer,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        self.optimizer.current_lr()
    }

    /// Samples a fresh batch and applies one update.
    pub fn step(&mut self) -> Result<SpdLossBreakdown> {
        let batch = sample_batch(
            &self.data,
            self.config.batch_size,
            &mut stream(self.seed, self.step, Purpose::SpdData),
        )?;
        let out = spd_train_step(
            &self.target,
            &mut self.decomposition,
            &mut self.optimizer,
            &self.config,
            &batch.inputs,
            self.seed,
            self.step,
        )?;
        self.step += 1;
        Ok(out)
    }

    /// Runs until `config.steps` updates have been applied, calling
    /// `on_step` after each. On a numerical failure the decomposition is
    /// left at its last finite state.
    pub fn run(
        &mut self,
        mut on_step: impl FnMut(u64, &SpdLossBreakdown, &Decomposition),
    ) -> Result<()> {
        while self.step < self.config.steps {
            let backup = self.decomposition.clone();
            match self.step() {
                Ok(b) => on_step(self.step - 1, &b, &self.decomposition),
                Err(e) => {
                    self.decomposition = backup;
                    return Err(e);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::TmsModel;
    use crate::optim::{OptimizerSpec, Schedule};
    use crate::spd::tests::small_config;

    fn target() -> TargetModel {
        TargetModel::Tms(TmsModel::new(
            5,
            2,
            false,
            &mut stream(0, 0, Purpose::TargetInit),
        ))
    }

    #[test]
    fn total_is_weighted_sum() {
        let mut t =
            SpdTrainer::new(target(), small_config(), DistributionSpec::tms(5, 0.3), 1).unwrap();
        let b = t.step().unwrap();
        let want = b.faithfulness
            + b.beta1 * b.stochastic_recon
            + b.beta2 * b.stochastic_recon_layerwise
            + b.beta3 * b.importance_minimality;
        assert!((b.total - want).abs() < 1e-15);
        assert!(
            b.faithfulness >= 0.0 && b.stochastic_recon >= 0.0 && b.importance_minimality >= 0.0
        );
    }

    #[test]
    fn deterministic_given_seed() {
        let run = || {
            let mut t = SpdTrainer::new(target(), small_config(), DistributionSpec::tms(5, 0.3), 2)
                .unwrap();
            let mut rows = Vec::new();
            t.run(|s, b, _| rows.push(b.csv_row(s))).unwrap();
            (rows, t.decomposition)
        };
        let (a, da) = run();
        let (b, db) = run();
        assert_eq!(a, b);
        assert_eq!(da, db);
        assert_eq!(a.len(), 10);
    }

    #[test]
    fn faithfulness_only_converges() {
        let cfg = SpdConfig {
            beta1: 0.0,
            beta2: 0.0,
            beta3: 1e-300,
            n_subcomponents: 6,
            steps: 3000,
            batch_size: 4,
            optimizer: OptimizerSpec::adam(1e-2, Schedule::Cosine),
            ..small_config()
        };
        let mut t = SpdTrainer::new(target(), cfg, DistributionSpec::tms(5, 0.3), 3).unwrap();
        let mut last = f64::NAN;
        t.run(|_, b, _| last = b.faithfulness).unwrap();
        assert!(last < 1e-8, "faithfulness {last}");
    }

    #[test]
    fn divergence_aborts_and_keeps_last_finite_state() {
        let cfg = SpdConfig {
            optimizer: OptimizerSpec::adam(1e300, Schedule::Constant),
            steps: 20,
            ..small_config()
        };
        let mut t = SpdTrainer::new(target(), cfg, DistributionSpec::tms(5, 0.3), 4).unwrap();
        let err = t.run(|_, _, _| {}).unwrap_err();
        assert!(matches!(err, Error::Numerical(_)), "{err}");
        assert!(t.decomposition.params().iter().all(|p| p.is_finite()));
    }
}
