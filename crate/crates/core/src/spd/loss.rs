// SPDX-License-Identifier: MIT OR Apache-2.0

//! The four loss terms, built on a tape so that gradients reach the factors
//! and gate parameters, plus plain-value wrappers.

use serde::{Deserialize, Serialize};

use super::{draw_uniforms, BoundDecomposition, Decomposition, SpdConfig, SubcomponentSet};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::models::{BoundModel, LayerWeights, TargetModel};
use crate::tensor::DenseMatrix;

/// Loss values of one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpdLossBreakdown {
    pub faithfulness: f64,
    pub stochastic_recon: f64,
    pub stochastic_recon_layerwise: f64,
    pub importance_minimality: f64,
    pub total: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    pub p: f64,
}

impl SpdLossBreakdown {
    pub fn is_finite(&self) -> bool {
        [
            self.faithfulness,
            self.stochastic_recon,
            self.stochastic_recon_layerwise,
            self.importance_minimality,
            self.total,
        ]
        .iter()
        .all(|x| x.is_finite())
    }
}

impl std::fmt::Display for SpdLossBreakdown {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "faithfulness {:.3e}, stochastic_recon {:.3e}, layerwise {:.3e}, importance {:.3e}, total {:.3e}",
            self.faithfulness,
            self.stochastic_recon,
            self.stochastic_recon_layerwise,
            self.importance_minimality,
            self.total
        )
    }
}

/// Gate outputs per decomposed matrix.
#[derive(Clone, Debug)]
pub struct GateVars {
    /// Inner activations `a · Vᵀ`.
    pub h: Vec<Var>,
    /// Lower leaky hard sigmoid of the gate output; drives the masks.
    pub g: Vec<Var>,
    /// Upper leaky hard sigmoid of the gate output; penalized for minimality.
    pub g_upper: Vec<Var>,
}

/// Loss nodes of one step.
#[derive(Clone, Debug)]
pub struct SpdLossVars {
    pub faithfulness: Var,
    pub stochastic_recon: Var,
    pub stochastic_recon_layerwise: Var,
    pub importance_minimality: Var,
    pub total: Var,
    pub gates: GateVars,
}

impl SpdLossVars {
    pub fn breakdown(&self, tape: &Tape, cfg: &SpdConfig) -> SpdLossBreakdown {
        let v = |x: Var| tape.value(x).item().unwrap_or(f64::NAN);
        SpdLossBreakdown {
            faithfulness: v(self.faithfulness),
            stochastic_recon: v(self.stochastic_recon),
            stochastic_recon_layerwise: v(self.stochastic_recon_layerwise),
            importance_minimality: v(self.importance_minimality),
            total: v(self.total),
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            beta3: cfg.beta3,
            p: cfg.p,
        }
    }
}

/// `(1/N) Σ_l ‖W_l − U_l V_l‖²`, `N` the number of decomposed weights.
pub fn build_faithfulness(
    tape: &mut Tape,
    weights: &[Var],
    dec: &BoundDecomposition,
) -> Result<Var> {
    let n: usize = weights.iter().map(|&w| tape.value(w).len()).sum();
    let mut terms = Vec::with_capacity(weights.len());
    for (l, &w) in weights.iter().enumerate() {
        let rec = tape.matmul(dec.u[l], dec.v[l])?;
        let diff = tape.sub(w, rec)?;
        let sq = tape.mul(diff, diff)?;
        terms.push(tape.sum(sq)?);
    }
    let total = tape.add_all(&terms)?;
    tape.scale(total, 1.0 / n.max(1) as f64)
}

/// Inner activations and both importance paths for every matrix.
pub fn build_gates(
    tape: &mut Tape,
    activations: &[Var],
    dec: &BoundDecomposition,
) -> Result<GateVars> {
    let mut out = GateVars {
        h: Vec::new(),
        g: Vec::new(),
        g_upper: Vec::new(),
    };
    for (l, &a) in activations.iter().enumerate() {
        let h = tape.matmul_nt(a, dec.v[l])?;
        let [w_in, b_in, w_out, b_out] = dec.gates[l];
        let raw = tape.gate_mlp(h, w_in, b_in, w_out, b_out)?;
        out.h.push(h);
        out.g.push(tape.leaky_hard_sigmoid_lower(raw)?);
        out.g_upper.push(tape.leaky_hard_sigmoid_upper(raw)?);
    }
    Ok(out)
}

/// `m = g + (1 − g) ⊙ r` with `r` held constant, so `∂m/∂g = 1 − r`.
pub fn build_masks(tape: &mut Tape, g: &[Var], r: &[DenseMatrix]) -> Result<Vec<Var>> {
    if g.len() != r.len() {
        return Err(Error::shape(
            "masks",
            format!("{} importances, {} uniforms", g.len(), r.len()),
        ));
    }
    let one = tape.constant(DenseMatrix::scalar(1.0));
    g.iter()
        .zip(r)
        .map(|(&g, r)| {
            let rv = tape.constant(r.clone());
            let gap = tape.sub(one, g)?;
            let spread = tape.mul(gap, rv)?;
            tape.add(g, spread)
        })
        .collect()
}

/// MSE between the target output and the output with every matrix replaced
/// by its (optionally masked) factored form.
#[allow(clippy::too_many_arguments)]
pub fn build_stochastic_recon(
    tape: &mut Tape,
    target: &TargetModel,
    target_bound: &BoundModel,
    x: Var,
    target_out: Var,
    dec: &BoundDecomposition,
    masks: &[Option<Var>],
) -> Result<Var> {
    let weights: Vec<LayerWeights> = masks
        .iter()
        .enumerate()
        .map(|(l, &mask)| LayerWeights::Factored {
            u: dec.u[l],
            v: dec.v[l],
            mask,
        })
        .collect();
    let trace = target.forward_with(tape, target_bound, x, &weights)?;
    tape.mse(trace.output, target_out)
}

/// One MSE per matrix `l`: only `l` is replaced by its masked factored form,
/// all other matrices keep their target weights.
pub fn build_layerwise_terms(
    tape: &mut Tape,
    target: &TargetModel,
    target_bound: &BoundModel,
    x: Var,
    target_out: Var,
    dec: &BoundDecomposition,
    masks: &[Var],
) -> Result<Vec<Var>> {
    let dense = target.dense_weights(target_bound);
    (0..masks.len())
        .map(|l| {
            let mut weights = dense.clone();
            weights[l] = LayerWeights::Factored {
                u: dec.u[l],
                v: dec.v[l],
                mask: Some(masks[l]),
            };
            let trace = target.forward_with(tape, target_bound, x, &weights)?;
            tape.mse(trace.output, target_out)
        })
        .collect()
}

/// `(1/B) Σ_b Σ_l Σ_c |g_upper|^p`.
pub fn build_minimality(tape: &mut Tape, g_upper: &[Var], p: f64) -> Result<Var> {
    if !(p > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "minimality exponent must be > 0, got {p}"
        )));
    }
    let batch = g_upper.first().map_or(1, |&g| tape.value(g).rows()).max(1);
    let mut terms = Vec::with_capacity(g_upper.len());
    for &g in g_upper {
        let pw = tape.pow_abs(g, p)?;
        terms.push(tape.sum(pw)?);
    }
    let total = tape.add_all(&terms)?;
    tape.scale(total, 1.0 / batch as f64)
}

/// Full objective for one batch. `uniforms[s][l]` is the `B × C` uniform
/// draw for sample `s` and matrix `l`; the same masks feed both
/// reconstruction losses.
#[allow(clippy::too_many_arguments)]
pub fn build_spd_loss(
    tape: &mut Tape,
    target: &TargetModel,
    target_bound: &BoundModel,
    x: Var,
    target_out: Var,
    activations: &[Var],
    dec: &BoundDecomposition,
    cfg: &SpdConfig,
    uniforms: &[Vec<DenseMatrix>],
) -> Result<SpdLossVars> {
    if uniforms.is_empty() {
        return Err(Error::InvalidArgument(
            "at least one mask sample is required".into(),
        ));
    }
    let dense: Vec<Var> = target
        .dense_weights(target_bound)
        .into_iter()
        .map(|w| match w {
            LayerWeights::Dense(v) => v,
            LayerWeights::Factored { .. } => unreachable!("dense_weights returns dense weights"),
        })
        .collect();
    let n_layers = dense.len();
    let faithfulness = build_faithfulness(tape, &dense, dec)?;
    let gates = build_gates(tape, activations, dec)?;
    let importance_minimality = build_minimality(tape, &gates.g_upper, cfg.p)?;

    let mut recon_terms = Vec::new();
    let mut layer_terms = Vec::new();
    for r in uniforms {
        let masks = build_masks(tape, &gates.g, r)?;
        let all: Vec<Option<Var>> = masks.iter().copied().map(Some).collect();
        let recon = build_stochastic_recon(tape, target, target_bound, x, target_out, dec, &all)?;
        recon_terms.push(recon);
        if n_layers == 1 {
            // With one matrix the layerwise term is the same computation.
            layer_terms.push(recon);
        } else {
            layer_terms.extend(build_layerwise_terms(
                tape,
                target,
                target_bound,
                x,
                target_out,
                dec,
                &masks,
            )?);
        }
    }
    let s = uniforms.len() as f64;
    let recon_sum = tape.add_all(&recon_terms)?;
    let stochastic_recon = tape.scale(recon_sum, 1.0 / s)?;
    let layer_sum = tape.add_all(&layer_terms)?;
    let stochastic_recon_layerwise = tape.scale(layer_sum, 1.0 / (s * n_layers as f64))?;

    let t1 = tape.scale(stochastic_recon, cfg.beta1)?;
    let t2 = tape.scale(stochastic_recon_layerwise, cfg.beta2)?;
    let t3 = tape.scale(importance_minimality, cfg.beta3)?;
    let total = tape.add_all(&[faithfulness, t1, t2, t3])?;
    Ok(SpdLossVars {
        faithfulness,
        stochastic_recon,
        stochastic_recon_layerwise,
        importance_minimality,
        total,
        gates,
    })
}

/// Plain-value faithfulness loss.
pub fn loss_faithfulness(weights: &[&DenseMatrix], comps: &SubcomponentSet) -> Result<f64> {
    if weights.len() != comps.n_layers() {
        return Err(Error::shape(
            "loss_faithfulness",
            format!(
                "{} matrices, {} factor pairs",
                weights.len(),
                comps.n_layers()
            ),
        ));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for (l, w) in weights.iter().enumerate() {
        let rec = comps.u[l]
            .matmul(&comps.v[l])
            .map_err(|e| Error::shape("loss_faithfulness", e.to_string()))?;
        total += w
            .sub(&rec)
            .map_err(|e| Error::shape("loss_faithfulness", e.to_string()))?
            .data()
            .iter()
            .map(|d| d * d)
            .sum::<f64>();
        n += w.len();
    }
    Ok(total / n.max(1) as f64)
}

/// Plain-value minimality loss. Rejects `p ≤ 0`.
pub fn loss_importance_minimality(g_upper: &[DenseMatrix], p: f64) -> Result<f64> {
    if !(p > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "minimality exponent must be > 0, got {p}"
        )));
    }
    let batch = g_upper.first().map_or(1, DenseMatrix::rows).max(1);
    let s: f64 = g_upper
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|&x| crate::activation::pow_abs(x, p))
        .sum();
    Ok(s / batch as f64)
}

struct Evaluated {
    recon: f64,
    layerwise: f64,
}

fn evaluate_recon(
    target: &TargetModel,
    dec: &Decomposition,
    x: &DenseMatrix,
    n_samples: usize,
    seed: u64,
    step: u64,
) -> Result<Evaluated> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument(
            "n_samples must be at least 1".into(),
        ));
    }
    dec.check_compatible(target)?;
    let (target_out, acts) = target.forward_capture(x)?;
    let mut tape = Tape::new();
    let tb = target.bind(&mut tape, false);
    let bd = dec.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let yv = tape.constant(target_out);
    let av: Vec<Var> = acts.into_iter().map(|a| tape.constant(a)).collect();
    let gates = build_gates(&mut tape, &av, &bd)?;
    let shapes: Vec<_> = gates.g.iter().map(|&g| tape.value(g).shape()).collect();
    let (mut recon, mut layerwise) = (0.0, 0.0);
    for s in 0..n_samples {
        let r = draw_uniforms(seed, step, s as u32, &shapes);
        let masks = build_masks(&mut tape, &gates.g, &r)?;
        let all: Vec<Option<Var>> = masks.iter().copied().map(Some).collect();
        let rv = build_stochastic_recon(&mut tape, target, &tb, xv, yv, &bd, &all)?;
        recon += tape.value(rv).data()[0];
        for t in build_layerwise_terms(&mut tape, target, &tb, xv, yv, &bd, &masks)? {
            layerwise += tape.value(t).data()[0];
        }
    }
    Ok(Evaluated {
        recon: recon / n_samples as f64,
        layerwise: layerwise / (n_samples * shapes.len()) as f64,
    })
}

/// All-matrices-masked reconstruction loss averaged over `n_samples` mask
/// draws keyed by `(seed, step)`.
pub fn loss_stochastic_recon(
    target: &TargetModel,
    dec: &Decomposition,
    x: &DenseMatrix,
    n_samples: usize,
    seed: u64,
    step: u64,
) -> Result<f64> {
    Ok(evaluate_recon(target, dec, x, n_samples, seed, step)?.recon)
}

/// Layerwise reconstruction loss under the same mask draws as
/// [`loss_stochastic_recon`].
pub fn loss_stochastic_recon_layerwise(
    target: &TargetModel,
    dec: &Decomposition,
    x: &DenseMatrix,
    n_samples: usize,
    seed: u64,
    step: u64,
) -> Result<f64> {
    Ok(evaluate_recon(target, dec, x, n_samples, seed, step)?.layerwise)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ResidualMlpModel, TmsModel};
    use crate::rng::{stream, Purpose};
    use crate::spd::{GateBank, GateParams};
    use rand::Rng;

    fn exact_decomposition(target: &TargetModel, gate_raw: f64) -> Decomposition {
        let mut u = Vec::new();
        let mut v = Vec::new();
        for (_, w) in target.decomposed() {
            u.push(w.clone());
            v.push(DenseMatrix::identity(w.cols()));
        }
        let layers = u
            .iter()
            .map(|u| {
                let c = u.cols();
                GateParams {
                    w_in: DenseMatrix::zeros(c, 2),
                    b_in: DenseMatrix::zeros(c, 2),
                    w_out: DenseMatrix::zeros(c, 2),
                    b_out: DenseMatrix::filled(1, c, gate_raw),
                }
            })
            .collect();
        Decomposition {
            components: SubcomponentSet { u, v },
            gates: GateBank { layers },
        }
    }

    #[test]
    fn faithfulness_examples() {
        let w = DenseMatrix::scalar(1.0);
        let zero = SubcomponentSet {
            u: vec![DenseMatrix::zeros(1, 1)],
            v: vec![DenseMatrix::zeros(1, 1)],
        };
        assert_eq!(loss_faithfulness(&[&w], &zero).unwrap(), 1.0);
        let exact = SubcomponentSet {
            u: vec![DenseMatrix::scalar(2.0)],
            v: vec![DenseMatrix::scalar(0.5)],
        };
        assert_eq!(loss_faithfulness(&[&w], &exact).unwrap(), 0.0);
    }

    #[test]
    fn faithfulness_matches_elementwise_loop() {
        let mut rng = stream(1, 0, Purpose::Other(1));
        let w = DenseMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
        let u = DenseMatrix::from_fn(3, 2, |_, _| rng.random_range(-1.0..1.0));
        let v = DenseMatrix::from_fn(2, 3, |_, _| rng.random_range(-1.0..1.0));
        let mut naive = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let mut rec = 0.0;
                for c in 0..2 {
                    rec += u.get(i, c) * v.get(c, j);
                }
                naive += (w.get(i, j) - rec).powi(2);
            }
        }
        naive /= 9.0;
        let set = SubcomponentSet {
            u: vec![u],
            v: vec![v],
        };
        assert!((loss_faithfulness(&[&w], &set).unwrap() - naive).abs() < 1e-15);
    }

    #[test]
    fn minimality_examples() {
        assert_eq!(
            loss_importance_minimality(&[DenseMatrix::zeros(4, 3)], 1.0).unwrap(),
            0.0
        );
        assert_eq!(
            loss_importance_minimality(&[DenseMatrix::scalar(1.0)], 2.0).unwrap(),
            1.0
        );
        let g = DenseMatrix::from_rows(&[vec![0.5, 0.5]]).unwrap();
        assert_eq!(loss_importance_minimality(&[g], 1.0).unwrap(), 1.0);
        assert!(loss_importance_minimality(&[DenseMatrix::scalar(1.0)], 0.0).is_err());
        assert!(loss_importance_minimality(&[DenseMatrix::scalar(1.0)], -2.0).is_err());
    }

    #[test]
    fn exact_reconstruction_with_full_importance_gives_zero_recon() {
        let mut rng = stream(2, 0, Purpose::TargetInit);
        let x = DenseMatrix::from_fn(16, 6, |_, _| rng.random_range(0.0..1.0));
        for target in [
            TargetModel::Tms(TmsModel::new(6, 3, true, &mut rng)),
            TargetModel::ResidualMlp(ResidualMlpModel::new(6, 10, 2, 4, &mut rng)),
        ] {
            let dec = exact_decomposition(&target, 5.0);
            assert!(loss_stochastic_recon(&target, &dec, &x, 2, 0, 0).unwrap() < 1e-28);
            assert!(loss_stochastic_recon_layerwise(&target, &dec, &x, 2, 0, 0).unwrap() < 1e-28);
        }
    }

    #[test]
    fn zero_target_gives_zero_recon_at_zero_importance() {
        let mut tms = TmsModel::new(4, 2, false, &mut stream(3, 0, Purpose::TargetInit));
        tms.w = DenseMatrix::zeros(2, 4);
        let target = TargetModel::Tms(tms);
        let dec = exact_decomposition(&target, -3.0);
        let x = DenseMatrix::filled(5, 4, 0.5);
        assert_eq!(
            loss_stochastic_recon(&target, &dec, &x, 1, 0, 0).unwrap(),
            0.0
        );
    }

    #[test]
    fn single_matrix_layerwise_equals_recon() {
        let mut rng = stream(4, 0, Purpose::TargetInit);
        let target = TargetModel::Tms(TmsModel::new(5, 2, false, &mut rng));
        let dec = Decomposition::init(&target, 7, 4, 3);
        let x = DenseMatrix::from_fn(12, 5, |_, _| rng.random_range(0.0..1.0));
        let a = loss_stochastic_recon(&target, &dec, &x, 3, 9, 4).unwrap();
        let b = loss_stochastic_recon_layerwise(&target, &dec, &x, 3, 9, 4).unwrap();
        assert_eq!(a, b);
        assert!(a > 0.0);
    }

    #[test]
    fn recon_matches_hand_replay() {
        // Replays one mask draw with explicit per-example weight matrices.
        let mut rng = stream(5, 0, Purpose::TargetInit);
        let tms = TmsModel::new(4, 2, false, &mut rng);
        let target = TargetModel::Tms(tms.clone());
        let dec = Decomposition::init(&target, 3, 2, 8);
        let x = DenseMatrix::from_fn(3, 4, |_, _| rng.random_range(0.0..1.0));
        let got = loss_stochastic_recon(&target, &dec, &x, 1, 21, 6).unwrap();

        let y = target.forward(&x).unwrap();
        let (u, v) = (&dec.components.u[0], &dec.components.v[0]);
        let h = x.matmul_nt(v).unwrap();
        let (g, _) = dec.gates.causal_importance(0, &h).unwrap();
        let r = draw_uniforms(21, 6, 0, &[g.shape()]).remove(0);
        let mut se = 0.0;
        for b in 0..3 {
            let m: Vec<f64> = (0..3)
                .map(|c| g.get(b, c) + (1.0 - g.get(b, c)) * r.get(b, c))
                .collect();
            let w = super::super::masked_weights(u, v, &m).unwrap();
            for i in 0..4 {
                let mut pre = tms.b.get(0, i);
                for k in 0..2 {
                    let mut hid = 0.0;
                    for j in 0..4 {
                        hid += w.get(k, j) * x.get(b, j);
                    }
                    pre += w.get(k, i) * hid;
                }
                se += (pre.max(0.0) - y.get(b, i)).powi(2);
            }
        }
        let want = se / 12.0;
        assert!((got - want).abs() < 1e-14, "{got} vs {want}");
    }
}
