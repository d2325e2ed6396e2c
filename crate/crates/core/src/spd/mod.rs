// SPDX-License-Identifier: MIT OR Apache-2.0

//! Stochastic parameter decomposition.
//!
//! Each decomposed weight matrix `W` (`d_out × d_in`) is approximated by a
//! sum of `C` rank-one subcomponents `U[:, c] · V[c, :]`. A scalar gate per
//! subcomponent predicts from the inner activation `h = a · Vᵀ` how much that
//! subcomponent can be ablated on the current input, and training samples
//! random partial ablations within that budget.

mod loss;
mod trainer;

pub use loss::{
    build_faithfulness, build_gates, build_layerwise_terms, build_masks, build_minimality,
    build_spd_loss, build_stochastic_recon, loss_faithfulness, loss_importance_minimality,
    loss_stochastic_recon, loss_stochastic_recon_layerwise, GateVars, SpdLossBreakdown,
    SpdLossVars,
};
pub use trainer::{spd_loss_breakdown, spd_train_step, SpdTrainer, LOSS_CSV_HEADER};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::activation::{gelu, leaky_hard_sigmoid_lower, leaky_hard_sigmoid_upper};
use crate::autodiff::{Tape, Var};
use crate::checkpoint::{target_from_checkpoint, target_to_checkpoint, Checkpoint};
use crate::error::{Error, Result};
use crate::models::TargetModel;
use crate::optim::OptimizerSpec;
use crate::rng::{stream, Purpose};
use crate::tensor::{norm, DenseMatrix};

/// SPD hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpdConfig {
    /// Subcomponents per decomposed matrix.
    pub n_subcomponents: usize,
    /// Hidden width of each gate MLP.
    pub d_gate: usize,
    /// Weight of the all-layers stochastic reconstruction loss.
    pub beta1: f64,
    /// Weight of the layerwise stochastic reconstruction loss.
    pub beta2: f64,
    /// Weight of the importance-minimality loss.
    pub beta3: f64,
    /// Exponent of the importance-minimality loss.
    pub p: f64,
    /// Mask samples per step.
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub optimizer: OptimizerSpec,
}

fn default_samples() -> usize {
    1
}

impl SpdConfig {
    pub fn validate(&self) -> Result<()> {
        let f = |name: &str| format!("spd.{name}");
        if self.n_subcomponents == 0 {
            return Err(Error::config(f("n_subcomponents"), "must be positive"));
        }
        if self.d_gate == 0 {
            return Err(Error::config(f("d_gate"), "must be positive"));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(
                    f(name),
                    format!("must be finite and non-negative, got {v}"),
                ));
            }
        }
        if !(self.beta3 > 0.0 && self.beta3.is_finite()) {
            return Err(Error::config(
                f("beta3"),
                format!("must be positive, got {}", self.beta3),
            ));
        }
        if !(self.p > 0.0 && self.p.is_finite()) {
            return Err(Error::config(
                f("p"),
                format!("must be positive, got {}", self.p),
            ));
        }
        if self.n_samples == 0 {
            return Err(Error::config(f("n_samples"), "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config(f("batch_size"), "must be positive"));
        }
        self.optimizer.validate("spd.optimizer")
    }
}

/// Rank-one factors `U` (`d_out × C`) and `V` (`C × d_in`) per decomposed matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SubcomponentSet {
    pub u: Vec<DenseMatrix>,
    pub v: Vec<DenseMatrix>,
}

impl SubcomponentSet {
    /// Uniform entries in `±1/√(C·d_in)`.
    pub fn init<R: Rng>(shapes: &[(usize, usize)], c: usize, rng: &mut R) -> Self {
        let mut u = Vec::new();
        let mut v = Vec::new();
        for &(d_out, d_in) in shapes {
            let bound = 1.0 / ((c * d_in).max(1) as f64).sqrt();
            u.push(DenseMatrix::from_fn(d_out, c, |_, _| {
                rng.random_range(-bound..=bound)
            }));
            v.push(DenseMatrix::from_fn(c, d_in, |_, _| {
                rng.random_range(-bound..=bound)
            }));
        }
        Self { u, v }
    }

    pub fn n_layers(&self) -> usize {
        self.u.len()
    }

    pub fn n_subcomponents(&self, layer: usize) -> usize {
        self.u[layer].cols()
    }

    /// `Σ_c U[:, c] · V[c, :]`.
    pub fn reconstruction(&self, layer: usize) -> DenseMatrix {
        self.u[layer]
            .matmul(&self.v[layer])
            .expect("factor shapes are consistent")
    }

    /// `U[:, c] · V[c, :]`.
    pub fn rank_one(&self, layer: usize, c: usize) -> DenseMatrix {
        let u = &self.u[layer];
        let v = &self.v[layer];
        DenseMatrix::from_fn(u.rows(), v.cols(), |i, j| u.get(i, c) * v.get(c, j))
    }

    /// Frobenius norm of each rank-one term, `‖U[:, c]‖·‖V[c, :]‖`.
    pub fn rank_one_norms(&self, layer: usize) -> Vec<f64> {
        let u = &self.u[layer];
        let v = &self.v[layer];
        (0..u.cols())
            .map(|c| norm(&u.column(c)) * norm(v.row(c)))
            .collect()
    }

    fn check(&self, shapes: &[(usize, usize)]) -> Result<()> {
        if self.u.len() != shapes.len() || self.v.len() != shapes.len() {
            return Err(Error::shape(
                "subcomponents",
                format!(
                    "{} factor pairs for {} matrices",
                    self.u.len(),
                    shapes.len()
                ),
            ));
        }
        for (l, &(d_out, d_in)) in shapes.iter().enumerate() {
            let (u, v) = (&self.u[l], &self.v[l]);
            if u.rows() != d_out || v.cols() != d_in || u.cols() != v.rows() {
                return Err(Error::shape(
                    "subcomponents",
                    format!(
                        "layer {l}: U {:?}, V {:?} for a {d_out}x{d_in} matrix",
                        u.shape(),
                        v.shape()
                    ),
                ));
            }
        }
        Ok(())
    }
}

/// Parameters of the `C` scalar gate MLPs of one decomposed matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct GateParams {
    /// `C × d_gate`
    pub w_in: DenseMatrix,
    /// `C × d_gate`
    pub b_in: DenseMatrix,
    /// `C × d_gate`
    pub w_out: DenseMatrix,
    /// `1 × C`
    pub b_out: DenseMatrix,
}

impl GateParams {
    pub fn n_subcomponents(&self) -> usize {
        self.w_in.rows()
    }

    pub fn d_gate(&self) -> usize {
        self.w_in.cols()
    }

    /// Raw gate output for inner activations `h` (`B × C`).
    pub fn raw(&self, h: &DenseMatrix) -> Result<DenseMatrix> {
        let c = self.n_subcomponents();
        if h.cols() != c {
            return Err(Error::shape(
                "gate_mlp",
                format!("h has {} columns, gates {c}", h.cols()),
            ));
        }
        let d = self.d_gate();
        let mut out = DenseMatrix::zeros(h.rows(), c);
        for b in 0..h.rows() {
            for j in 0..c {
                let x = h.get(b, j);
                let mut acc = self.b_out.get(0, j);
                for k in 0..d {
                    acc +=
                        self.w_out.get(j, k) * gelu(x * self.w_in.get(j, k) + self.b_in.get(j, k));
                }
                out.set(b, j, acc);
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateBank {
    pub layers: Vec<GateParams>,
}

impl GateBank {
    /// Fan-in uniform init: input weights and biases in `±1`, output weights
    /// in `±1/√d_gate`, output bias zero.
    pub fn init<R: Rng>(counts: &[usize], d_gate: usize, rng: &mut R) -> Self {
        let out_bound = 1.0 / (d_gate as f64).sqrt();
        let layers = counts
            .iter()
            .map(|&c| GateParams {
                w_in: DenseMatrix::from_fn(c, d_gate, |_, _| rng.random_range(-1.0..=1.0)),
                b_in: DenseMatrix::from_fn(c, d_gate, |_, _| rng.random_range(-1.0..=1.0)),
                w_out: DenseMatrix::from_fn(c, d_gate, |_, _| {
                    rng.random_range(-out_bound..=out_bound)
                }),
                b_out: DenseMatrix::zeros(1, c),
            })
            .collect();
        Self { layers }
    }

    /// `(g, g_upper)`: causal importances through the lower leaky hard
    /// sigmoid (used for masks) and the upper one (used for minimality).
    pub fn causal_importance(
        &self,
        layer: usize,
        h: &DenseMatrix,
    ) -> Result<(DenseMatrix, DenseMatrix)> {
        let raw = self.layers[layer].raw(h)?;
        Ok((
            raw.map(leaky_hard_sigmoid_lower),
            raw.map(leaky_hard_sigmoid_upper),
        ))
    }
}

/// `h = a · Vᵀ`.
pub fn inner_activations(v: &DenseMatrix, a: &DenseMatrix) -> Result<DenseMatrix> {
    a.matmul_nt(v).map_err(|_| {
        Error::shape(
            "inner_activations",
            format!(
                "a is {}x{}, V is {}x{}",
                a.rows(),
                a.cols(),
                v.rows(),
                v.cols()
            ),
        )
    })
}

/// Uniforms and masks for every decomposed matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSample {
    pub r: Vec<DenseMatrix>,
    pub m: Vec<DenseMatrix>,
}

/// Uniform `[0, 1)` draws shaped like `shapes`, one independent stream per
/// matrix for sample index `sample`.
pub fn draw_uniforms(
    seed: u64,
    step: u64,
    sample: u32,
    shapes: &[(usize, usize)],
) -> Vec<DenseMatrix> {
    shapes
        .iter()
        .enumerate()
        .map(|(l, &(rows, cols))| {
            let mut rng = stream(
                seed,
                step,
                Purpose::Mask {
                    sample,
                    layer: l as u32,
                },
            );
            DenseMatrix::from_fn(rows, cols, |_, _| rng.random::<f64>())
        })
        .collect()
}

/// `m = g + (1 − g) ⊙ r` with fresh uniforms `r`.
pub fn sample_masks(g: &[DenseMatrix], seed: u64, step: u64, sample: u32) -> MaskSample {
    let shapes: Vec<_> = g.iter().map(DenseMatrix::shape).collect();
    let r = draw_uniforms(seed, step, sample, &shapes);
    let m = g
        .iter()
        .zip(&r)
        .map(|(g, r)| g.zip_map(r, |g, r| g + (1.0 - g) * r).expect("same shape"))
        .collect();
    MaskSample { r, m }
}

/// `U · diag(m) · V` for one mask row.
pub fn masked_weights(u: &DenseMatrix, v: &DenseMatrix, m: &[f64]) -> Result<DenseMatrix> {
    if m.len() != u.cols() || u.cols() != v.rows() {
        return Err(Error::shape(
            "masked_weights",
            format!(
                "U {:?}, V {:?}, mask of length {}",
                u.shape(),
                v.shape(),
                m.len()
            ),
        ));
    }
    let mut scaled = u.clone();
    for i in 0..scaled.rows() {
        for (x, &mc) in scaled.row_mut(i).iter_mut().zip(m) {
            *x *= mc;
        }
    }
    scaled.matmul(v)
}

/// Subcomponents plus gates for one target model.
#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition {
    pub components: SubcomponentSet,
    pub gates: GateBank,
}

/// A [`Decomposition`] placed on a tape.
#[derive(Clone, Debug)]
pub struct BoundDecomposition {
    pub u: Vec<Var>,
    pub v: Vec<Var>,
    /// `[w_in, b_in, w_out, b_out]` per matrix.
    pub gates: Vec<[Var; 4]>,
}

impl BoundDecomposition {
    /// Parameter leaves in [`Decomposition::params`] order.
    pub fn vars(&self) -> Vec<Var> {
        let mut out: Vec<Var> = self
            .u
            .iter()
            .zip(&self.v)
            .flat_map(|(&u, &v)| [u, v])
            .collect();
        out.extend(self.gates.iter().flatten().copied());
        out
    }
}

pub const SPD_KIND: &str = "spd";

impl Decomposition {
    pub fn init(target: &TargetModel, c: usize, d_gate: usize, seed: u64) -> Self {
        let shapes: Vec<_> = target.sites().iter().map(|s| s.shape).collect();
        let mut rng = stream(seed, 0, Purpose::SpdInit);
        let components = SubcomponentSet::init(&shapes, c, &mut rng);
        let gates = GateBank::init(&vec![c; shapes.len()], d_gate, &mut rng);
        Self { components, gates }
    }

    pub fn n_layers(&self) -> usize {
        self.components.n_layers()
    }

    /// Checks factor and gate shapes against `target`'s decomposed matrices.
    pub fn check_compatible(&self, target: &TargetModel) -> Result<()> {
        let shapes: Vec<_> = target.sites().iter().map(|s| s.shape).collect();
        self.components.check(&shapes)?;
        if self.gates.layers.len() != shapes.len() {
            return Err(Error::shape(
                "gates",
                "gate bank does not match the number of matrices",
            ));
        }
        for (l, g) in self.gates.layers.iter().enumerate() {
            let c = self.components.n_subcomponents(l);
            let d = g.d_gate();
            let ok = g.w_in.shape() == (c, d)
                && g.b_in.shape() == (c, d)
                && g.w_out.shape() == (c, d)
                && g.b_out.shape() == (1, c);
            if !ok {
                return Err(Error::shape(
                    "gates",
                    format!("layer {l}: gate shapes do not match C={c}"),
                ));
            }
        }
        Ok(())
    }

    /// Trainable parameters: `U, V` per matrix, then the four gate tensors
    /// per matrix.
    pub fn params(&self) -> Vec<&DenseMatrix> {
        let mut out: Vec<&DenseMatrix> = self
            .components
            .u
            .iter()
            .zip(&self.components.v)
            .flat_map(|(u, v)| [u, v])
            .collect();
        for g in &self.gates.layers {
            out.extend([&g.w_in, &g.b_in, &g.w_out, &g.b_out]);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut DenseMatrix> {
        let mut out: Vec<&mut DenseMatrix> = self
            .components
            .u
            .iter_mut()
            .zip(self.components.v.iter_mut())
            .flat_map(|(u, v)| [u, v])
            .collect();
        for g in &mut self.gates.layers {
            out.extend([&mut g.w_in, &mut g.b_in, &mut g.w_out, &mut g.b_out]);
        }
        out
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundDecomposition {
        let mut leaf = |m: &DenseMatrix| {
            if trainable {
                tape.param(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        let u = self.components.u.iter().map(&mut leaf).collect();
        let v = self.components.v.iter().map(&mut leaf).collect();
        let gates = self
            .gates
            .layers
            .iter()
            .map(|g| [leaf(&g.w_in), leaf(&g.b_in), leaf(&g.w_out), leaf(&g.b_out)])
            .collect();
        BoundDecomposition { u, v, gates }
    }

    /// Lower-path causal importances of every matrix for inputs `x`.
    pub fn causal_importances(
        &self,
        target: &TargetModel,
        x: &DenseMatrix,
    ) -> Result<Vec<DenseMatrix>> {
        let (_, acts) = target.forward_capture(x)?;
        acts.iter()
            .enumerate()
            .map(|(l, a)| {
                let h = inner_activations(&self.components.v[l], a)?;
                Ok(self.gates.causal_importance(l, &h)?.0)
            })
            .collect()
    }

    /// Packs the decomposition with its target and config.
    pub fn to_checkpoint(
        &self,
        target: &TargetModel,
        config: &SpdConfig,
        run: serde_json::Value,
    ) -> Result<Checkpoint> {
        let tck = target_to_checkpoint(target, serde_json::Value::Null);
        let meta = serde_json::json!({
            "target": tck.meta,
            "spd": serde_json::to_value(config)?,
            "run": run,
        });
        let mut ck = Checkpoint::new(SPD_KIND, meta);
        for (name, t) in tck.tensors {
            ck.push(format!("target.{name}"), t);
        }
        for l in 0..self.n_layers() {
            ck.push(format!("U.{l}"), self.components.u[l].clone());
            ck.push(format!("V.{l}"), self.components.v[l].clone());
            let g = &self.gates.layers[l];
            ck.push(format!("gate.{l}.w_in"), g.w_in.clone());
            ck.push(format!("gate.{l}.b_in"), g.b_in.clone());
            ck.push(format!("gate.{l}.w_out"), g.w_out.clone());
            ck.push(format!("gate.{l}.b_out"), g.b_out.clone());
        }
        Ok(ck)
    }

    /// Unpacks `(target, decomposition, config)`.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(TargetModel, Decomposition, SpdConfig)> {
        if ck.kind != SPD_KIND {
            return Err(Error::Checkpoint {
                path: "<memory>".into(),
                reason: format!("expected an `{SPD_KIND}` checkpoint, found `{}`", ck.kind),
            });
        }
        let mut tck = Checkpoint::new(crate::checkpoint::TARGET_KIND, ck.meta["target"].clone());
        for (name, t) in &ck.tensors {
            if let Some(rest) = name.strip_prefix("target.") {
                tck.push(rest, t.clone());
            }
        }
        let target = target_from_checkpoint(&tck)?;
        let config: SpdConfig = serde_json::from_value(ck.meta["spd"].clone())?;
        let n = target.sites().len();
        let mut u = Vec::new();
        let mut v = Vec::new();
        let mut layers = Vec::new();
        for l in 0..n {
            u.push(ck.require(&format!("U.{l}"))?.clone());
            v.push(ck.require(&format!("V.{l}"))?.clone());
            layers.push(GateParams {
                w_in: ck.require(&format!("gate.{l}.w_in"))?.clone(),
                b_in: ck.require(&format!("gate.{l}.b_in"))?.clone(),
                w_out: ck.require(&format!("gate.{l}.w_out"))?.clone(),
                b_out: ck.require(&format!("gate.{l}.b_out"))?.clone(),
            });
        }
        let dec = Decomposition {
            components: SubcomponentSet { u, v },
            gates: GateBank { layers },
        };
        dec.check_compatible(&target)?;
        Ok((target, dec, config))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::models::TmsModel;
    use crate::optim::Schedule;

    pub(crate) fn small_config() -> SpdConfig {
        SpdConfig {
            n_subcomponents: 4,
            d_gate: 3,
            beta1: 1.0,
            beta2: 1.0,
            beta3: 1e-2,
            p: 1.0,
            n_samples: 1,
            steps: 10,
            batch_size: 8,
            optimizer: OptimizerSpec::adam(1e-3, Schedule::Cosine),
        }
    }

    #[test]
    fn inner_activations_examples() {
        let v = DenseMatrix::identity(2);
        let a = DenseMatrix::from_rows(&[vec![2.0, 3.0]]).unwrap();
        assert_eq!(inner_activations(&v, &a).unwrap(), a);
        assert_eq!(
            inner_activations(&v, &DenseMatrix::zeros(1, 2)).unwrap(),
            DenseMatrix::zeros(1, 2)
        );
        let err = inner_activations(&v, &DenseMatrix::zeros(1, 3))
            .unwrap_err()
            .to_string();
        assert!(err.contains("inner_activations"), "{err}");
    }

    #[test]
    fn inner_activations_match_naive_dot_products() {
        let mut rng = stream(4, 0, Purpose::Other(0));
        let v = DenseMatrix::from_fn(3, 4, |_, _| rng.random_range(-1.0..1.0));
        let a = DenseMatrix::from_fn(5, 4, |_, _| rng.random_range(-1.0..1.0));
        let h = inner_activations(&v, &a).unwrap();
        for b in 0..5 {
            for c in 0..3 {
                let mut dot = 0.0;
                for j in 0..4 {
                    dot += v.get(c, j) * a.get(b, j);
                }
                assert!((h.get(b, c) - dot).abs() < 1e-14);
            }
        }
    }

    fn constant_gate(raw: f64) -> GateParams {
        GateParams {
            w_in: DenseMatrix::zeros(1, 2),
            b_in: DenseMatrix::zeros(1, 2),
            w_out: DenseMatrix::zeros(1, 2),
            b_out: DenseMatrix::scalar(raw),
        }
    }

    #[test]
    fn causal_importance_regions() {
        let h = DenseMatrix::from_rows(&[vec![0.7], vec![-2.0]]).unwrap();
        for (raw, lower, upper) in [(1.5, 1.0, 1.005), (0.3, 0.3, 0.3), (-0.5, -0.005, 0.0)] {
            let bank = GateBank {
                layers: vec![constant_gate(raw)],
            };
            let (g, gu) = bank.causal_importance(0, &h).unwrap();
            for b in 0..2 {
                assert!((g.get(b, 0) - lower).abs() < 1e-15, "raw {raw}");
                assert!((gu.get(b, 0) - upper).abs() < 1e-15, "raw {raw}");
            }
        }
    }

    #[test]
    fn gate_raw_matches_tape_op() {
        let mut rng = stream(5, 0, Purpose::Other(0));
        let gates = GateBank::init(&[3], 4, &mut rng);
        let h = DenseMatrix::from_fn(6, 3, |_, _| rng.random_range(-2.0..2.0));
        let direct = gates.layers[0].raw(&h).unwrap();
        let mut t = Tape::new();
        let g = &gates.layers[0];
        let vars: Vec<Var> = [&h, &g.w_in, &g.b_in, &g.w_out, &g.b_out]
            .iter()
            .map(|m| t.constant((*m).clone()))
            .collect();
        let out = t
            .gate_mlp(vars[0], vars[1], vars[2], vars[3], vars[4])
            .unwrap();
        assert!(t.value(out).max_abs_diff(&direct).unwrap() < 1e-14);
    }

    #[test]
    fn mask_examples() {
        let g = vec![
            DenseMatrix::ones(3, 4),
            DenseMatrix::zeros(3, 4),
            DenseMatrix::filled(3, 4, 0.6),
        ];
        let s = sample_masks(&g, 1, 2, 0);
        assert_eq!(s.m[0], DenseMatrix::ones(3, 4));
        assert_eq!(s.m[1], s.r[1]);
        for (&m, &r) in s.m[2].data().iter().zip(s.r[2].data()) {
            assert!((0.6..=1.0).contains(&m));
            assert!((0.0..1.0).contains(&r));
        }
    }

    #[test]
    fn masked_weight_examples() {
        let mut rng = stream(6, 0, Purpose::Other(0));
        let u = DenseMatrix::from_fn(3, 4, |_, _| rng.random_range(-1.0..1.0));
        let v = DenseMatrix::from_fn(4, 2, |_, _| rng.random_range(-1.0..1.0));
        let full = u.matmul(&v).unwrap();
        assert!(
            masked_weights(&u, &v, &[1.0; 4])
                .unwrap()
                .max_abs_diff(&full)
                .unwrap()
                < 1e-15
        );
        assert_eq!(
            masked_weights(&u, &v, &[0.0; 4]).unwrap(),
            DenseMatrix::zeros(3, 2)
        );
        let set = SubcomponentSet {
            u: vec![u.clone()],
            v: vec![v.clone()],
        };
        let one = masked_weights(&u, &v, &[0.0, 0.0, 1.0, 0.0]).unwrap();
        assert!(one.max_abs_diff(&set.rank_one(0, 2)).unwrap() < 1e-15);
        assert!(masked_weights(&u, &v, &[1.0; 3]).is_err());
    }

    #[test]
    fn rank_one_norms_are_frobenius() {
        let mut rng = stream(7, 0, Purpose::Other(0));
        let set = SubcomponentSet::init(&[(3, 5)], 4, &mut rng);
        let norms = set.rank_one_norms(0);
        for (c, n) in norms.iter().enumerate() {
            assert!((set.rank_one(0, c).frobenius_norm() - n).abs() < 1e-14);
        }
    }

    #[test]
    fn config_validation() {
        let cfg = small_config();
        assert!(cfg.validate().is_ok());
        for bad in [
            SpdConfig {
                p: 0.0,
                ..cfg.clone()
            },
            SpdConfig {
                p: -1.0,
                ..cfg.clone()
            },
            SpdConfig {
                beta3: 0.0,
                ..cfg.clone()
            },
            SpdConfig {
                n_samples: 0,
                ..cfg.clone()
            },
            SpdConfig {
                n_subcomponents: 0,
                ..cfg.clone()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config { .. })));
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let target = TargetModel::Tms(TmsModel::new(
            5,
            2,
            true,
            &mut stream(0, 0, Purpose::TargetInit),
        ));
        let dec = Decomposition::init(&target, 6, 3, 11);
        dec.check_compatible(&target).unwrap();
        let cfg = small_config();
        let ck = dec
            .to_checkpoint(&target, &cfg, serde_json::json!({"seed": 11}))
            .unwrap();
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        let (t2, d2, c2) = Decomposition::from_checkpoint(&back).unwrap();
        assert_eq!(t2, target);
        assert_eq!(d2, dec);
        assert_eq!(c2, cfg);
    }
}
