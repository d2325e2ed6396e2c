// SPDX-License-Identifier: MIT OR Apache-2.0

//! Target toy models: the toy model of superposition (optionally with a
//! hidden identity matrix) and the residual MLP.
//!
//! Every model exposes the weight matrices that get decomposed, in a fixed
//! order, and a tape forward pass in which each of those matrices can be
//! swapped for a factored (and optionally masked) stand-in.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

/// `x̂ = ReLU(Wᵀ W x + b)`, or `ReLU(Wᵀ I W x + b)` with the hidden identity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TmsModel {
    /// `n_hidden × n_features`.
    pub w: DenseMatrix,
    /// `1 × n_features`.
    pub b: DenseMatrix,
    /// `n_hidden × n_hidden`; frozen.
    pub identity: Option<DenseMatrix>,
}

impl TmsModel {
    pub fn new<R: Rng>(
        n_features: usize,
        n_hidden: usize,
        hidden_identity: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            w: uniform_fan_in(n_hidden, n_features, n_features, rng),
            b: DenseMatrix::zeros(1, n_features),
            identity: hidden_identity.then(|| DenseMatrix::identity(n_hidden)),
        }
    }

    pub fn n_features(&self) -> usize {
        self.w.cols()
    }

    pub fn n_hidden(&self) -> usize {
        self.w.rows()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpBlock {
    /// `neurons × d_resid`.
    pub w_in: DenseMatrix,
    /// `1 × neurons`.
    pub b_in: DenseMatrix,
    /// `d_resid × neurons`.
    pub w_out: DenseMatrix,
}

/// Residual stream seeded by a fixed embedding, one or more MLP blocks that
/// add `W_out · ReLU(W_in · resid + b_in)`, and the unembedding `W_Eᵀ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualMlpModel {
    /// `d_resid × n_features`, unit-norm columns; frozen. The unembedding is
    /// its transpose.
    pub embed: DenseMatrix,
    pub blocks: Vec<MlpBlock>,
}

impl ResidualMlpModel {
    pub fn new<R: Rng>(
        n_features: usize,
        d_resid: usize,
        n_layers: usize,
        neurons_per_layer: usize,
        rng: &mut R,
    ) -> Self {
        let mut embed =
            DenseMatrix::from_fn(d_resid, n_features, |_, _| StandardNormal.sample(rng));
        for j in 0..n_features {
            let norm = embed.column(j).iter().map(|x| x * x).sum::<f64>().sqrt();
            for i in 0..d_resid {
                embed.set(i, j, embed.get(i, j) / norm);
            }
        }
        let blocks = (0..n_layers)
            .map(|_| MlpBlock {
                w_in: uniform_fan_in(neurons_per_layer, d_resid, d_resid, rng),
                b_in: DenseMatrix::zeros(1, neurons_per_layer),
                w_out: uniform_fan_in(d_resid, neurons_per_layer, neurons_per_layer, rng),
            })
            .collect();
        Self { embed, blocks }
    }

    pub fn n_features(&self) -> usize {
        self.embed.cols()
    }

    pub fn d_resid(&self) -> usize {
        self.embed.rows()
    }

    pub fn total_neurons(&self) -> usize {
        self.blocks.iter().map(|b| b.w_in.rows()).sum()
    }

    /// `W_U = W_Eᵀ`.
    pub fn unembed(&self) -> DenseMatrix {
        self.embed.transpose()
    }
}

fn uniform_fan_in<R: Rng>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> DenseMatrix {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    DenseMatrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..=bound))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TargetModel {
    Tms(TmsModel),
    ResidualMlp(ResidualMlpModel),
}

/// A decomposed weight matrix's place in the network.
#[derive(Clone, Debug, PartialEq)]
pub struct MatrixSite {
    pub name: String,
    /// `(d_out, d_in)`.
    pub shape: (usize, usize),
}

/// Stand-in for one decomposed matrix during a tape forward pass.
#[derive(Clone, Copy, Debug)]
pub enum LayerWeights {
    /// The dense `d_out × d_in` matrix itself.
    Dense(Var),
    /// `U · diag(m) · V`, with `U: d_out × C`, `V: C × d_in` and per-example
    /// masks `m: batch × C`. No mask means all ones.
    Factored { u: Var, v: Var, mask: Option<Var> },
}

impl LayerWeights {
    /// `a · Wᵀ` for `a: batch × d_in`.
    pub fn apply(&self, tape: &mut Tape, a: Var) -> Result<Var> {
        match *self {
            LayerWeights::Dense(w) => tape.matmul_nt(a, w),
            LayerWeights::Factored { u, v, mask } => {
                let mut inner = tape.matmul_nt(a, v)?;
                if let Some(m) = mask {
                    inner = tape.mul(inner, m)?;
                }
                tape.matmul_nt(inner, u)
            }
        }
    }

    /// `a · W` for `a: batch × d_out`.
    pub fn apply_transposed(&self, tape: &mut Tape, a: Var) -> Result<Var> {
        match *self {
            LayerWeights::Dense(w) => tape.matmul(a, w),
            LayerWeights::Factored { u, v, mask } => {
                let mut inner = tape.matmul(a, u)?;
                if let Some(m) = mask {
                    inner = tape.mul(inner, m)?;
                }
                tape.matmul(inner, v)
            }
        }
    }
}

/// Model parameters placed on a tape.
#[derive(Clone, Debug)]
pub enum BoundModel {
    Tms {
        w: Var,
        b: Var,
        identity: Option<Var>,
    },
    ResidualMlp {
        embed: Var,
        blocks: Vec<(Var, Var, Var)>,
    },
}

/// Output of a tape forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub output: Var,
    /// Activation entering each decomposed matrix (at its first use), in
    /// [`TargetModel::sites`] order.
    pub activations: Vec<Var>,
}

impl TargetModel {
    pub fn n_features(&self) -> usize {
        match self {
            TargetModel::Tms(m) => m.n_features(),
            TargetModel::ResidualMlp(m) => m.n_features(),
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            TargetModel::Tms(_) => "tms",
            TargetModel::ResidualMlp(_) => "residual_mlp",
        }
    }

    /// Decomposed matrices in canonical order.
    pub fn decomposed(&self) -> Vec<(String, &DenseMatrix)> {
        match self {
            TargetModel::Tms(m) => {
                let mut v = vec![("W".to_string(), &m.w)];
                if let Some(i) = &m.identity {
                    v.push(("I".to_string(), i));
                }
                v
            }
            TargetModel::ResidualMlp(m) => m
                .blocks
                .iter()
                .enumerate()
                .flat_map(|(l, b)| {
                    [
                        (format!("layers.{l}.W_in"), &b.w_in),
                        (format!("layers.{l}.W_out"), &b.w_out),
                    ]
                })
                .collect(),
        }
    }

    pub fn sites(&self) -> Vec<MatrixSite> {
        self.decomposed()
            .into_iter()
            .map(|(name, m)| MatrixSite {
                name,
                shape: m.shape(),
            })
            .collect()
    }

    /// Parameters updated by target training, in a fixed order.
    pub fn trainable(&self) -> Vec<&DenseMatrix> {
        match self {
            TargetModel::Tms(m) => vec![&m.w, &m.b],
            TargetModel::ResidualMlp(m) => m
                .blocks
                .iter()
                .flat_map(|b| [&b.w_in, &b.b_in, &b.w_out])
                .collect(),
        }
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut DenseMatrix> {
        match self {
            TargetModel::Tms(m) => vec![&mut m.w, &mut m.b],
            TargetModel::ResidualMlp(m) => m
                .blocks
                .iter_mut()
                .flat_map(|b| [&mut b.w_in, &mut b.b_in, &mut b.w_out])
                .collect(),
        }
    }

    /// Places the model on `tape`. With `trainable`, the parameters listed by
    /// [`Self::trainable`] become gradient leaves; everything else is constant.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModel {
        let mut leaf = |m: &DenseMatrix, train: bool| {
            if train {
                tape.param(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        match self {
            TargetModel::Tms(m) => BoundModel::Tms {
                w: leaf(&m.w, trainable),
                b: leaf(&m.b, trainable),
                identity: m.identity.as_ref().map(|i| leaf(i, false)),
            },
            TargetModel::ResidualMlp(m) => BoundModel::ResidualMlp {
                embed: leaf(&m.embed, false),
                blocks: m
                    .blocks
                    .iter()
                    .map(|b| {
                        (
                            leaf(&b.w_in, trainable),
                            leaf(&b.b_in, trainable),
                            leaf(&b.w_out, trainable),
                        )
                    })
                    .collect(),
            },
        }
    }

    /// Tape forward pass with the decomposed matrices supplied by `weights`.
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        x: Var,
        weights: &[LayerWeights],
    ) -> Result<ForwardTrace> {
        let n_sites = self.sites().len();
        if weights.len() != n_sites {
            return Err(Error::shape(
                "forward",
                format!(
                    "{} layer weights for {} decomposed matrices",
                    weights.len(),
                    n_sites
                ),
            ));
        }
        let x_cols = tape.value(x).cols();
        if x_cols != self.n_features() {
            let op = match self {
                TargetModel::Tms(_) => "tms_forward",
                TargetModel::ResidualMlp(_) => "residual_mlp_forward",
            };
            return Err(Error::shape(
                op,
                format!(
                    "input has {x_cols} columns, model has {} features",
                    self.n_features()
                ),
            ));
        }
        match bound {
            BoundModel::Tms { b, identity, .. } => {
                let mut activations = vec![x];
                let mut hidden = weights[0].apply(tape, x)?;
                if identity.is_some() {
                    activations.push(hidden);
                    hidden = weights[1].apply(tape, hidden)?;
                }
                let pre = weights[0].apply_transposed(tape, hidden)?;
                let pre = tape.add_row(pre, *b)?;
                let output = tape.relu(pre)?;
                Ok(ForwardTrace {
                    output,
                    activations,
                })
            }
            BoundModel::ResidualMlp { embed, blocks } => {
                let mut activations = Vec::with_capacity(n_sites);
                let mut resid = tape.matmul_nt(x, *embed)?;
                for (l, (_, b_in, _)) in blocks.iter().enumerate() {
                    activations.push(resid);
                    let pre = weights[2 * l].apply(tape, resid)?;
                    let pre = tape.add_row(pre, *b_in)?;
                    let hidden = tape.relu(pre)?;
                    activations.push(hidden);
                    let out = weights[2 * l + 1].apply(tape, hidden)?;
                    resid = tape.add(resid, out)?;
                }
                let output = tape.matmul(resid, *embed)?;
                Ok(ForwardTrace {
                    output,
                    activations,
                })
            }
        }
    }

    /// Decomposed matrices of `bound` as dense stand-ins.
    pub fn dense_weights(&self, bound: &BoundModel) -> Vec<LayerWeights> {
        match bound {
            BoundModel::Tms { w, identity, .. } => {
                let mut v = vec![LayerWeights::Dense(*w)];
                if let Some(i) = identity {
                    v.push(LayerWeights::Dense(*i));
                }
                v
            }
            BoundModel::ResidualMlp { blocks, .. } => blocks
                .iter()
                .flat_map(|&(w_in, _, w_out)| {
                    [LayerWeights::Dense(w_in), LayerWeights::Dense(w_out)]
                })
                .collect(),
        }
    }

    /// Plain forward pass.
    pub fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        Ok(self.forward_capture(x)?.0)
    }

    /// Forward pass returning the output and the activations entering each
    /// decomposed matrix.
    pub fn forward_capture(&self, x: &DenseMatrix) -> Result<(DenseMatrix, Vec<DenseMatrix>)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let weights = self.dense_weights(&bound);
        let xv = tape.constant(x.clone());
        let trace = self.forward_with(&mut tape, &bound, xv, &weights)?;
        let acts = trace
            .activations
            .iter()
            .map(|&a| tape.value(a).clone())
            .collect();
        Ok((tape.value(trace.output).clone(), acts))
    }
}
