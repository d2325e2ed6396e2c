// SPDX-License-Identifier: MIT OR Apache-2.0

//! Define-by-run reverse-mode automatic differentiation over [`DenseMatrix`].
//!
//! A [`Tape`] records every operation in execution order, so inputs always
//! precede the nodes that consume them. Leaves are either parameters
//! (gradients wanted) or constants. [`Tape::backward`] walks the tape in
//! reverse from a `1 × 1` root and returns a [`Gradients`] map.
//!
//! ```
//! use spd_core::autodiff::Tape;
//! use spd_core::tensor::DenseMatrix;
//!
//! let mut tape = Tape::new();
//! let x = tape.param(DenseMatrix::scalar(3.0));
//! let sq = tape.mul(x, x).unwrap();
//! let root = tape.sum(sq).unwrap();
//! let grads = tape.backward(root).unwrap();
//! assert_eq!(grads.get(x).unwrap().item(), Some(6.0));
//! ```
//!
//! Tapes are single-threaded and rebuilt every training step.

use std::collections::HashMap;

use crate::activation as act;
use crate::error::{Error, Result};
use crate::tensor::DenseMatrix;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation kinds understood by [`Tape::forward_op`].
///
/// Elementwise binary ops require identical shapes, except that either
/// operand may be a `1 × 1` scalar. `AddRow` / `MulRow` take a `1 × cols`
/// row as their second operand and apply it to every row of the first.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OpKind {
    /// `a · b`
    MatMul,
    /// `a · bᵀ`
    MatMulNT,
    /// `aᵀ · b`
    MatMulTN,
    Transpose,
    Add,
    Sub,
    Mul,
    AddRow,
    MulRow,
    Scale(f64),
    Relu,
    Gelu,
    HardSigmoid,
    LeakyHardSigmoidLower,
    LeakyHardSigmoidUpper,
    /// `|x|^p`
    PowAbs(f64),
    /// Sum of all entries, `1 × 1`.
    Sum,
    /// Mean of all entries, `1 × 1`.
    Mean,
    /// Mean squared difference of two equal-shape matrices, `1 × 1`.
    Mse,
    /// Repeats every column `k` times: `n × c → n × (c·k)`.
    RepeatCols(usize),
    /// Sums consecutive groups of `k` columns: `n × (c·k) → n × c`.
    GroupSumCols(usize),
    /// Per-column scalar MLP with one GELU hidden layer.
    ///
    /// Inputs `(h, w_in, b_in, w_out, b_out)` with shapes `B×C`, `C×d`,
    /// `C×d`, `C×d`, `1×C`. Output `B×C` where
    /// `out[b,c] = b_out[c] + Σ_k w_out[c,k]·gelu(h[b,c]·w_in[c,k] + b_in[c,k])`.
    GateMlp,
}

impl OpKind {
    fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::MatMulNT => "matmul_nt",
            OpKind::MatMulTN => "matmul_tn",
            OpKind::Transpose => "transpose",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::AddRow => "add_row",
            OpKind::MulRow => "mul_row",
            OpKind::Scale(_) => "scale",
            OpKind::Relu => "relu",
            OpKind::Gelu => "gelu",
            OpKind::HardSigmoid => "hard_sigmoid",
            OpKind::LeakyHardSigmoidLower => "leaky_hard_sigmoid_lower",
            OpKind::LeakyHardSigmoidUpper => "leaky_hard_sigmoid_upper",
            OpKind::PowAbs(_) => "pow_abs",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Mse => "mse",
            OpKind::RepeatCols(_) => "repeat_cols",
            OpKind::GroupSumCols(_) => "group_sum_cols",
            OpKind::GateMlp => "gate_mlp",
        }
    }

    fn param_bits(self) -> u64 {
        match self {
            OpKind::Scale(x) | OpKind::PowAbs(x) => x.to_bits(),
            OpKind::RepeatCols(k) | OpKind::GroupSumCols(k) => k as u64,
            _ => 0,
        }
    }

    fn arity(self) -> usize {
        match self {
            OpKind::MatMul
            | OpKind::MatMulNT
            | OpKind::MatMulTN
            | OpKind::Add
            | OpKind::Sub
            | OpKind::Mul
            | OpKind::AddRow
            | OpKind::MulRow
            | OpKind::Mse => 2,
            OpKind::GateMlp => 5,
            _ => 1,
        }
    }
}

#[derive(Debug)]
enum Origin {
    Param,
    Constant,
    Op(OpKind, Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: DenseMatrix,
    origin: Origin,
    requires_grad: bool,
    /// Op-specific forward state reused by the backward rule.
    aux: Option<Vec<f64>>,
}

/// Operation identity used to reuse constant results: kind name, scalar
/// parameter bits, inputs.
type ConstKey = (&'static str, u64, Vec<usize>);

/// Recorded computation.
///
/// An op whose inputs are all constants is evaluated once; recording it again
/// with the same inputs returns the earlier node.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    constants: HashMap<ConstKey, Var>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<DenseMatrix>>,
}

impl Gradients {
    /// Adjoint of `v`, or `None` if `v` does not influence the root or does
    /// not require gradients.
    pub fn get(&self, v: Var) -> Option<&DenseMatrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<DenseMatrix> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf whose gradient is wanted.
    pub fn param(&mut self, value: DenseMatrix) -> Var {
        self.push(value, Origin::Param, true, None)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: DenseMatrix) -> Var {
        self.push(value, Origin::Constant, false, None)
    }

    pub fn value(&self, v: Var) -> &DenseMatrix {
        &self.nodes[v.0].value
    }

    pub fn is_param(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].origin, Origin::Param)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(
        &mut self,
        value: DenseMatrix,
        origin: Origin,
        requires_grad: bool,
        aux: Option<Vec<f64>>,
    ) -> Var {
        self.nodes.push(Node {
            value,
            origin,
            requires_grad,
            aux,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records `kind` applied to `inputs` and returns the output node.
    pub fn forward_op(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        if inputs.len() != kind.arity() {
            return Err(Error::shape(
                kind.name(),
                format!("expected {} inputs, got {}", kind.arity(), inputs.len()),
            ));
        }
        if let Some(bad) = inputs.iter().find(|v| v.0 >= self.nodes.len()) {
            return Err(Error::InvalidArgument(format!(
                "{}: node {} is not on this tape",
                kind.name(),
                bad.0
            )));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let key = (!requires_grad).then(|| {
            (
                kind.name(),
                kind.param_bits(),
                inputs.iter().map(|v| v.0).collect(),
            )
        });
        if let Some(&hit) = key.as_ref().and_then(|k| self.constants.get(k)) {
            return Ok(hit);
        }
        let (value, aux) = self.eval(kind, inputs)?;
        if !value.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite output from `{}`",
                kind.name()
            )));
        }
        let out = self.push(value, Origin::Op(kind, inputs.to_vec()), requires_grad, aux);
        if let Some(k) = key {
            self.constants.insert(k, out);
        }
        Ok(out)
    }

    fn eval(&self, kind: OpKind, inputs: &[Var]) -> Result<(DenseMatrix, Option<Vec<f64>>)> {
        let v = |i: usize| &self.nodes[inputs[i].0].value;
        let name = kind.name();
        let out = match kind {
            OpKind::MatMul => v(0).matmul(v(1))?,
            OpKind::MatMulNT => v(0).matmul_nt(v(1))?,
            OpKind::MatMulTN => v(0).matmul_tn(v(1))?,
            OpKind::Transpose => v(0).transpose(),
            OpKind::Add => broadcast_binary(name, v(0), v(1), |a, b| a + b)?,
            OpKind::Sub => broadcast_binary(name, v(0), v(1), |a, b| a - b)?,
            OpKind::Mul => broadcast_binary(name, v(0), v(1), |a, b| a * b)?,
            OpKind::AddRow => row_binary(name, v(0), v(1), |a, b| a + b)?,
            OpKind::MulRow => row_binary(name, v(0), v(1), |a, b| a * b)?,
            OpKind::Scale(s) => v(0).scale(s),
            OpKind::Relu => v(0).map(act::relu),
            OpKind::Gelu => v(0).map(act::gelu),
            OpKind::HardSigmoid => v(0).map(act::hard_sigmoid),
            OpKind::LeakyHardSigmoidLower => v(0).map(act::leaky_hard_sigmoid_lower),
            OpKind::LeakyHardSigmoidUpper => v(0).map(act::leaky_hard_sigmoid_upper),
            OpKind::PowAbs(p) => {
                if p <= 0.0 {
                    return Err(Error::InvalidArgument(format!("pow_abs exponent {p} <= 0")));
                }
                v(0).map(|x| act::pow_abs(x, p))
            }
            OpKind::Sum => DenseMatrix::scalar(v(0).sum()),
            OpKind::Mean => {
                if v(0).is_empty() {
                    return Err(Error::shape(name, "mean of an empty matrix"));
                }
                DenseMatrix::scalar(v(0).mean())
            }
            OpKind::Mse => {
                let (a, b) = (v(0), v(1));
                a.check_same_shape(b, name)?;
                if a.is_empty() {
                    return Err(Error::shape(name, "mse of empty matrices"));
                }
                let s: f64 = a
                    .data()
                    .iter()
                    .zip(b.data())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum();
                DenseMatrix::scalar(s / a.len() as f64)
            }
            OpKind::RepeatCols(k) => {
                if k == 0 {
                    return Err(Error::shape(name, "repeat factor 0"));
                }
                let a = v(0);
                let mut out = DenseMatrix::zeros(a.rows(), a.cols() * k);
                for i in 0..a.rows() {
                    let src = a.row(i);
                    let dst = out.row_mut(i);
                    for (j, &x) in src.iter().enumerate() {
                        dst[j * k..(j + 1) * k].fill(x);
                    }
                }
                out
            }
            OpKind::GroupSumCols(k) => {
                let a = v(0);
                if k == 0 || a.cols() % k != 0 {
                    return Err(Error::shape(
                        name,
                        format!("{} columns not divisible into groups of {k}", a.cols()),
                    ));
                }
                let groups = a.cols() / k;
                let mut out = DenseMatrix::zeros(a.rows(), groups);
                for i in 0..a.rows() {
                    let src = a.row(i);
                    let dst = out.row_mut(i);
                    for (g, d) in dst.iter_mut().enumerate() {
                        *d = src[g * k..(g + 1) * k].iter().sum();
                    }
                }
                out
            }
            OpKind::GateMlp => return gate_mlp_forward(v(0), v(1), v(2), v(3), v(4)),
        };
        Ok((out, None))
    }

    /// Reverse pass from a `1 × 1` root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_value = &self
            .nodes
            .get(root.0)
            .ok_or_else(|| Error::InvalidArgument(format!("node {} is not on this tape", root.0)))?
            .value;
        if root_value.shape() != (1, 1) {
            return Err(Error::shape(
                "backward",
                format!(
                    "root must be 1x1, got {}x{}",
                    root_value.rows(),
                    root_value.cols()
                ),
            ));
        }
        let mut grads: Vec<Option<DenseMatrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(DenseMatrix::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Origin::Op(kind, inputs) = &node.origin else {
                continue;
            };
            let Some(dout) = grads[idx].take() else {
                continue;
            };
            let needs: Vec<bool> = inputs
                .iter()
                .map(|v| self.nodes[v.0].requires_grad)
                .collect();
            let input_grads = self.backward_op(*kind, inputs, node, &dout, &needs)?;
            for ((input, grad), need) in inputs.iter().zip(input_grads).zip(needs) {
                if !need {
                    continue;
                }
                let Some(grad) = grad else { continue };
                match &mut grads[input.0] {
                    Some(acc) => acc.add_assign(&grad)?,
                    slot @ None => *slot = Some(grad),
                }
            }
        }
        // Only parameter adjoints are reported.
        for (idx, node) in self.nodes.iter().enumerate() {
            if !matches!(node.origin, Origin::Param) {
                grads[idx] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn backward_op(
        &self,
        kind: OpKind,
        inputs: &[Var],
        node: &Node,
        dout: &DenseMatrix,
        needs: &[bool],
    ) -> Result<Vec<Option<DenseMatrix>>> {
        let v = |i: usize| &self.nodes[inputs[i].0].value;
        let grads = match kind {
            OpKind::MatMul => vec![
                needs[0].then(|| dout.matmul_nt(v(1))).transpose()?,
                needs[1].then(|| v(0).matmul_tn(dout)).transpose()?,
            ],
            OpKind::MatMulNT => vec![
                needs[0].then(|| dout.matmul(v(1))).transpose()?,
                needs[1].then(|| dout.matmul_tn(v(0))).transpose()?,
            ],
            OpKind::MatMulTN => vec![
                needs[0].then(|| v(1).matmul_nt(dout)).transpose()?,
                needs[1].then(|| v(0).matmul(dout)).transpose()?,
            ],
            OpKind::Transpose => vec![Some(dout.transpose())],
            OpKind::Add => vec![
                needs[0].then(|| reduce_to(dout.clone(), v(0))),
                needs[1].then(|| reduce_to(dout.clone(), v(1))),
            ],
            OpKind::Sub => vec![
                needs[0].then(|| reduce_to(dout.clone(), v(0))),
                needs[1].then(|| reduce_to(dout.scale(-1.0), v(1))),
            ],
            OpKind::Mul => {
                let (a, b) = (v(0), v(1));
                vec![
                    needs[0]
                        .then(|| broadcast_binary("mul", dout, b, |g, y| g * y))
                        .transpose()?
                        .map(|g| reduce_to(g, a)),
                    needs[1]
                        .then(|| broadcast_binary("mul", dout, a, |g, x| g * x))
                        .transpose()?
                        .map(|g| reduce_to(g, b)),
                ]
            }
            OpKind::AddRow => vec![
                needs[0].then(|| dout.clone()),
                needs[1].then(|| dout.column_sums()),
            ],
            OpKind::MulRow => {
                let (a, row) = (v(0), v(1));
                vec![
                    needs[0]
                        .then(|| row_binary("mul_row", dout, row, |g, r| g * r))
                        .transpose()?,
                    needs[1]
                        .then(|| dout.hadamard(a).map(|m| m.column_sums()))
                        .transpose()?,
                ]
            }
            OpKind::Scale(s) => vec![Some(dout.scale(s))],
            OpKind::Relu => vec![Some(unary_grad(dout, v(0), act::relu_grad))],
            OpKind::Gelu => vec![Some(unary_grad(dout, v(0), act::gelu_grad))],
            OpKind::HardSigmoid => vec![Some(unary_grad(dout, v(0), act::hard_sigmoid_grad))],
            OpKind::LeakyHardSigmoidLower => {
                vec![Some(unary_grad(
                    dout,
                    v(0),
                    act::leaky_hard_sigmoid_lower_grad,
                ))]
            }
            OpKind::LeakyHardSigmoidUpper => {
                vec![Some(unary_grad(
                    dout,
                    v(0),
                    act::leaky_hard_sigmoid_upper_grad,
                ))]
            }
            OpKind::PowAbs(p) => vec![Some(unary_grad(dout, v(0), |x| act::pow_abs_grad(x, p)))],
            OpKind::Sum => {
                let g = scalar_of(dout);
                vec![Some(DenseMatrix::filled(v(0).rows(), v(0).cols(), g))]
            }
            OpKind::Mean => {
                let a = v(0);
                let g = scalar_of(dout) / a.len() as f64;
                vec![Some(DenseMatrix::filled(a.rows(), a.cols(), g))]
            }
            OpKind::Mse => {
                let (a, b) = (v(0), v(1));
                let k = 2.0 * scalar_of(dout) / a.len() as f64;
                let diff = a.sub(b)?;
                vec![
                    needs[0].then(|| diff.scale(k)),
                    needs[1].then(|| diff.scale(-k)),
                ]
            }
            OpKind::RepeatCols(k) => {
                let a = v(0);
                let mut g = DenseMatrix::zeros(a.rows(), a.cols());
                for i in 0..a.rows() {
                    let src = dout.row(i);
                    for (j, d) in g.row_mut(i).iter_mut().enumerate() {
                        *d = src[j * k..(j + 1) * k].iter().sum();
                    }
                }
                vec![Some(g)]
            }
            OpKind::GroupSumCols(k) => {
                let a = v(0);
                let mut g = DenseMatrix::zeros(a.rows(), a.cols());
                for i in 0..a.rows() {
                    let src = dout.row(i);
                    let dst = g.row_mut(i);
                    for (j, &x) in src.iter().enumerate() {
                        dst[j * k..(j + 1) * k].fill(x);
                    }
                }
                vec![Some(g)]
            }
            OpKind::GateMlp => gate_mlp_backward(
                [v(0), v(1), v(2), v(3)],
                node.aux.as_deref().unwrap_or(&[]),
                dout,
                needs,
            ),
        };
        debug_assert!(grads.iter().zip(inputs).all(|(g, i)| g
            .as_ref()
            .is_none_or(|g| g.shape() == self.nodes[i.0].value.shape())));
        Ok(grads)
    }
}

macro_rules! unary_ops {
    ($($fn_name:ident => $kind:expr),* $(,)?) => {
        impl Tape {
            $(
                pub fn $fn_name(&mut self, a: Var) -> Result<Var> {
                    self.forward_op($kind, &[a])
                }
            )*
        }
    };
}

macro_rules! binary_ops {
    ($($fn_name:ident => $kind:expr),* $(,)?) => {
        impl Tape {
            $(
                pub fn $fn_name(&mut self, a: Var, b: Var) -> Result<Var> {
                    self.forward_op($kind, &[a, b])
                }
            )*
        }
    };
}

unary_ops! {
    transpose => OpKind::Transpose,
    relu => OpKind::Relu,
    gelu => OpKind::Gelu,
    hard_sigmoid => OpKind::HardSigmoid,
    leaky_hard_sigmoid_lower => OpKind::LeakyHardSigmoidLower,
    leaky_hard_sigmoid_upper => OpKind::LeakyHardSigmoidUpper,
    sum => OpKind::Sum,
    mean => OpKind::Mean,
}

binary_ops! {
    matmul => OpKind::MatMul,
    matmul_nt => OpKind::MatMulNT,
    matmul_tn => OpKind::MatMulTN,
    add => OpKind::Add,
    sub => OpKind::Sub,
    mul => OpKind::Mul,
    add_row => OpKind::AddRow,
    mul_row => OpKind::MulRow,
    mse => OpKind::Mse,
}

impl Tape {
    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.forward_op(OpKind::Scale(s), &[a])
    }

    pub fn pow_abs(&mut self, a: Var, p: f64) -> Result<Var> {
        self.forward_op(OpKind::PowAbs(p), &[a])
    }

    pub fn repeat_cols(&mut self, a: Var, k: usize) -> Result<Var> {
        self.forward_op(OpKind::RepeatCols(k), &[a])
    }

    pub fn group_sum_cols(&mut self, a: Var, k: usize) -> Result<Var> {
        self.forward_op(OpKind::GroupSumCols(k), &[a])
    }

    pub fn gate_mlp(
        &mut self,
        h: Var,
        w_in: Var,
        b_in: Var,
        w_out: Var,
        b_out: Var,
    ) -> Result<Var> {
        self.forward_op(OpKind::GateMlp, &[h, w_in, b_in, w_out, b_out])
    }

    /// Sum of several `1 × 1` nodes.
    pub fn add_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::InvalidArgument("add_all of no terms".into()))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }
}

fn scalar_of(m: &DenseMatrix) -> f64 {
    m.data()[0]
}

fn unary_grad(dout: &DenseMatrix, x: &DenseMatrix, f: impl Fn(f64) -> f64) -> DenseMatrix {
    let mut g = dout.clone();
    for (g, &x) in g.data_mut().iter_mut().zip(x.data()) {
        *g *= f(x);
    }
    g
}

fn broadcast_binary(
    op: &'static str,
    a: &DenseMatrix,
    b: &DenseMatrix,
    f: impl Fn(f64, f64) -> f64,
) -> Result<DenseMatrix> {
    if a.shape() == b.shape() {
        a.zip_map(b, f)
    } else if let Some(s) = b.item() {
        Ok(a.map(|x| f(x, s)))
    } else if let Some(s) = a.item() {
        Ok(b.map(|y| f(s, y)))
    } else {
        Err(Error::shape(
            op,
            format!(
                "{}x{} vs {}x{} (only scalar broadcasting is allowed)",
                a.rows(),
                a.cols(),
                b.rows(),
                b.cols()
            ),
        ))
    }
}

fn row_binary(
    op: &'static str,
    a: &DenseMatrix,
    row: &DenseMatrix,
    f: impl Fn(f64, f64) -> f64,
) -> Result<DenseMatrix> {
    if row.rows() != 1 || row.cols() != a.cols() {
        return Err(Error::shape(
            op,
            format!(
                "row operand must be 1x{}, got {}x{}",
                a.cols(),
                row.rows(),
                row.cols()
            ),
        ));
    }
    let mut out = a.clone();
    let r = row.data();
    for i in 0..out.rows() {
        for (o, &y) in out.row_mut(i).iter_mut().zip(r) {
            *o = f(*o, y);
        }
    }
    Ok(out)
}

/// Sums a full-shape gradient down to a broadcast operand's shape.
fn reduce_to(g: DenseMatrix, operand: &DenseMatrix) -> DenseMatrix {
    if g.shape() == operand.shape() {
        g
    } else {
        DenseMatrix::scalar(g.sum())
    }
}

fn gate_mlp_shapes(
    h: &DenseMatrix,
    w_in: &DenseMatrix,
    b_in: &DenseMatrix,
    w_out: &DenseMatrix,
    b_out: &DenseMatrix,
) -> Result<(usize, usize, usize)> {
    let (batch, c) = h.shape();
    let d = w_in.cols();
    let ok = w_in.rows() == c
        && b_in.shape() == (c, d)
        && w_out.shape() == (c, d)
        && b_out.shape() == (1, c);
    if !ok {
        return Err(Error::shape(
            "gate_mlp",
            format!(
                "h {batch}x{c}, w_in {:?}, b_in {:?}, w_out {:?}, b_out {:?}",
                w_in.shape(),
                b_in.shape(),
                w_out.shape(),
                b_out.shape()
            ),
        ));
    }
    Ok((batch, c, d))
}

fn gate_mlp_forward(
    h: &DenseMatrix,
    w_in: &DenseMatrix,
    b_in: &DenseMatrix,
    w_out: &DenseMatrix,
    b_out: &DenseMatrix,
) -> Result<(DenseMatrix, Option<Vec<f64>>)> {
    let (batch, c, d) = gate_mlp_shapes(h, w_in, b_in, w_out, b_out)?;
    let mut out = DenseMatrix::zeros(batch, c);
    // Φ(z) per (b, c, k), reused by the backward rule.
    let mut cdf = vec![0.0; batch * c * d];
    let (wi_all, bi_all, wo_all) = (w_in.data(), b_in.data(), w_out.data());
    for ((h_row, out_row), cdf_rows) in h
        .data()
        .chunks_exact(c)
        .zip(out.data_mut().chunks_exact_mut(c))
        .zip(cdf.chunks_exact_mut(c * d))
    {
        for (j, (&x, o)) in h_row.iter().zip(out_row.iter_mut()).enumerate() {
            let span = j * d..(j + 1) * d;
            let mut acc = b_out.data()[j];
            for (((&wi, &bi), &wo), phi_slot) in wi_all[span.clone()]
                .iter()
                .zip(&bi_all[span.clone()])
                .zip(&wo_all[span.clone()])
                .zip(&mut cdf_rows[span])
            {
                let z = x * wi + bi;
                let phi = act::normal_cdf(z);
                *phi_slot = phi;
                acc += wo * z * phi;
            }
            *o = acc;
        }
    }
    Ok((out, Some(cdf)))
}

fn gate_mlp_backward(
    [h, w_in, b_in, w_out]: [&DenseMatrix; 4],
    cdf: &[f64],
    dout: &DenseMatrix,
    needs: &[bool],
) -> Vec<Option<DenseMatrix>> {
    let (batch, c) = h.shape();
    let d = w_in.cols();
    let mut dh = DenseMatrix::zeros(batch, c);
    let mut dw_in = DenseMatrix::zeros(c, d);
    let mut db_in = DenseMatrix::zeros(c, d);
    let mut dw_out = DenseMatrix::zeros(c, d);
    let mut db_out = DenseMatrix::zeros(1, c);
    let (wi_all, bi_all, wo_all) = (w_in.data(), b_in.data(), w_out.data());
    for (((h_row, go_row), dh_row), cdf_rows) in h
        .data()
        .chunks_exact(c)
        .zip(dout.data().chunks_exact(c))
        .zip(dh.data_mut().chunks_exact_mut(c))
        .zip(cdf.chunks_exact(c * d))
    {
        for j in 0..c {
            let go = go_row[j];
            if go == 0.0 {
                continue;
            }
            let x = h_row[j];
            let span = j * d..(j + 1) * d;
            db_out.data_mut()[j] += go;
            let mut dx = 0.0;
            let (dwo, dwi, dbi) = (
                &mut dw_out.data_mut()[span.clone()],
                &mut dw_in.data_mut()[span.clone()],
                &mut db_in.data_mut()[span.clone()],
            );
            let (wi, bi, wo, phis) = (
                &wi_all[span.clone()],
                &bi_all[span.clone()],
                &wo_all[span.clone()],
                &cdf_rows[span],
            );
            for k in 0..d {
                let z = x * wi[k] + bi[k];
                let phi = phis[k];
                dwo[k] += go * z * phi;
                let dz = go * wo[k] * act::gelu_grad_with_cdf(z, phi);
                dwi[k] += dz * x;
                dbi[k] += dz;
                dx += dz * wi[k];
            }
            dh_row[j] = dx;
        }
    }
    vec![
        needs[0].then_some(dh),
        needs[1].then_some(dw_in),
        needs[2].then_some(db_in),
        needs[3].then_some(dw_out),
        needs[4].then_some(db_out),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> DenseMatrix {
        DenseMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn constant_ops_are_recorded_once() {
        let mut t = Tape::new();
        let a = t.constant(m(&[vec![1.0, -2.0]]));
        let p = t.param(m(&[vec![0.5, 0.5]]));
        let r1 = t.relu(a).unwrap();
        let r2 = t.relu(a).unwrap();
        assert_eq!(r1, r2);
        assert_ne!(t.scale(a, 2.0).unwrap(), t.scale(a, 3.0).unwrap());
        assert_ne!(t.relu(p).unwrap(), t.relu(p).unwrap());
    }

    #[test]
    fn matmul_identity_example() {
        let mut t = Tape::new();
        let a = t.constant(DenseMatrix::identity(2));
        let x = t.constant(m(&[vec![3.0], vec![4.0]]));
        let y = t.matmul(a, x).unwrap();
        assert_eq!(t.value(y), &m(&[vec![3.0], vec![4.0]]));
    }

    #[test]
    fn relu_and_gelu_examples() {
        let mut t = Tape::new();
        let x = t.constant(m(&[vec![-1.0, 2.0]]));
        let r = t.relu(x).unwrap();
        assert_eq!(t.value(r), &m(&[vec![0.0, 2.0]]));
        let z = t.constant(DenseMatrix::scalar(0.0));
        let g = t.gelu(z).unwrap();
        assert_eq!(t.value(g).item(), Some(0.0));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut t = Tape::new();
        let a = t.constant(DenseMatrix::zeros(2, 3));
        let b = t.constant(DenseMatrix::zeros(2, 3));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("2x3"), "{err}");
        let c = t.constant(DenseMatrix::zeros(3, 2));
        let err = t.add(a, c).unwrap_err().to_string();
        assert!(err.contains("add"), "{err}");
        let row = t.constant(DenseMatrix::zeros(1, 2));
        assert!(t.add_row(a, row).is_err());
    }

    #[test]
    fn backward_sum_is_ones() {
        let mut t = Tape::new();
        let x = t.param(m(&[vec![2.0, 5.0]]));
        let s = t.sum(x).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &m(&[vec![1.0, 1.0]]));
    }

    #[test]
    fn backward_mse_at_minimum_is_zero() {
        let mut t = Tape::new();
        let w = t.param(DenseMatrix::identity(2));
        let x = t.constant(m(&[vec![0.3], vec![-1.2]]));
        let y = t.constant(m(&[vec![0.3], vec![-1.2]]));
        let wx = t.matmul(w, x).unwrap();
        let loss = t.mse(wx, y).unwrap();
        let g = t.backward(loss).unwrap();
        assert_eq!(g.get(w).unwrap(), &DenseMatrix::zeros(2, 2));
    }

    #[test]
    fn backward_square_matches_central_difference() {
        let f = |x: f64| x * x;
        let h = 1e-5;
        let fd = (f(3.0 + h) - f(3.0 - h)) / (2.0 * h);
        let mut t = Tape::new();
        let x = t.param(DenseMatrix::scalar(3.0));
        let sq = t.mul(x, x).unwrap();
        let s = t.sum(sq).unwrap();
        let g = t.backward(s).unwrap().get(x).unwrap().item().unwrap();
        assert_eq!(g, 6.0);
        assert!((g - fd).abs() < 1e-8);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut t = Tape::new();
        let x = t.param(DenseMatrix::zeros(2, 1));
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn constants_get_no_adjoint() {
        let mut t = Tape::new();
        let x = t.param(DenseMatrix::scalar(2.0));
        let c = t.constant(DenseMatrix::scalar(4.0));
        let unused = t.param(DenseMatrix::scalar(1.0));
        let y = t.mul(x, c).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().item(), Some(4.0));
        assert!(g.get(c).is_none());
        assert!(g.get(unused).is_none());
    }

    #[test]
    fn scalar_broadcast_gradients_reduce() {
        let mut t = Tape::new();
        let s = t.param(DenseMatrix::scalar(2.0));
        let a = t.param(m(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let p = t.mul(a, s).unwrap();
        let r = t.sum(p).unwrap();
        let g = t.backward(r).unwrap();
        assert_eq!(g.get(s).unwrap().item(), Some(10.0));
        assert_eq!(g.get(a).unwrap(), &DenseMatrix::filled(2, 2, 2.0));
    }

    #[test]
    fn gate_mlp_matches_composition() {
        let (batch, c, d) = (3, 2, 4);
        let h = DenseMatrix::from_fn(batch, c, |i, j| 0.3 * i as f64 - 0.7 * j as f64 + 0.1);
        let w_in = DenseMatrix::from_fn(c, d, |i, k| ((i * d + k) as f64 * 0.37).sin());
        let b_in = DenseMatrix::from_fn(c, d, |i, k| ((i * d + k) as f64 * 0.91).cos() * 0.5);
        let w_out = DenseMatrix::from_fn(c, d, |i, k| ((i + 2 * k) as f64 * 0.13).sin());
        let b_out = DenseMatrix::from_fn(1, c, |_, j| 0.05 * j as f64);

        let mut t = Tape::new();
        let vars: Vec<Var> = [&h, &w_in, &b_in, &w_out, &b_out]
            .iter()
            .map(|x| t.param((*x).clone()))
            .collect();
        let fused = t
            .gate_mlp(vars[0], vars[1], vars[2], vars[3], vars[4])
            .unwrap();
        let fused_sum = t.sum(fused).unwrap();
        let fused_grads = t.backward(fused_sum).unwrap();

        let mut t2 = Tape::new();
        let v2: Vec<Var> = [&h, &w_in, &b_in, &w_out, &b_out]
            .iter()
            .map(|x| t2.param((*x).clone()))
            .collect();
        // Flatten per-subcomponent parameters into 1 × (C·d) rows.
        let w_in_row = t2.param(DenseMatrix::from_vec(1, c * d, w_in.data().to_vec()).unwrap());
        let b_in_row = t2.param(DenseMatrix::from_vec(1, c * d, b_in.data().to_vec()).unwrap());
        let w_out_row = t2.param(DenseMatrix::from_vec(1, c * d, w_out.data().to_vec()).unwrap());
        let rep = t2.repeat_cols(v2[0], d).unwrap();
        let pre = t2.mul_row(rep, w_in_row).unwrap();
        let pre = t2.add_row(pre, b_in_row).unwrap();
        let hid = t2.gelu(pre).unwrap();
        let prod = t2.mul_row(hid, w_out_row).unwrap();
        let summed = t2.group_sum_cols(prod, d).unwrap();
        let composed = t2.add_row(summed, v2[4]).unwrap();
        let comp_sum = t2.sum(composed).unwrap();
        let comp_grads = t2.backward(comp_sum).unwrap();

        assert!(t.value(fused).max_abs_diff(t2.value(composed)).unwrap() < 1e-14);
        let close =
            |a: &DenseMatrix, b: &[f64]| a.data().iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-13);
        assert!(close(
            fused_grads.get(vars[0]).unwrap(),
            comp_grads.get(v2[0]).unwrap().data()
        ));
        assert!(close(
            fused_grads.get(vars[1]).unwrap(),
            comp_grads.get(w_in_row).unwrap().data()
        ));
        assert!(close(
            fused_grads.get(vars[2]).unwrap(),
            comp_grads.get(b_in_row).unwrap().data()
        ));
        assert!(close(
            fused_grads.get(vars[3]).unwrap(),
            comp_grads.get(w_out_row).unwrap().data()
        ));
        assert!(close(
            fused_grads.get(vars[4]).unwrap(),
            comp_grads.get(v2[4]).unwrap().data()
        ));
    }
}
