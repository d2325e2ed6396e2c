// SPDX-License-Identifier: MIT OR Apache-2.0

//! Decomposition quality metrics.

use serde::{Deserialize, Serialize};

use crate::data::one_hot_probes;
use crate::error::{Error, Result};
use crate::models::{ResidualMlpModel, TargetModel};
use crate::spd::{Decomposition, SubcomponentSet};
use crate::tensor::{norm, DenseMatrix};

/// Mean max cosine similarity between target columns and subcomponent
/// column contributions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MmcsResult {
    pub mean: f64,
    /// Max cosine per included column.
    pub per_feature: Vec<f64>,
    /// Best subcomponent per included column.
    pub best: Vec<usize>,
    /// Column index of each entry of `per_feature`.
    pub features: Vec<usize>,
    /// Zero-norm target columns left out.
    pub excluded: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ml2rResult {
    pub mean: f64,
    pub per_feature: Vec<f64>,
    pub features: Vec<usize>,
    pub excluded: Vec<usize>,
}

fn check_factors(
    op: &'static str,
    w: &DenseMatrix,
    u: &DenseMatrix,
    v: &DenseMatrix,
) -> Result<()> {
    if u.rows() != w.rows() || v.cols() != w.cols() || u.cols() != v.rows() {
        return Err(Error::shape(
            op,
            format!("W {:?}, U {:?}, V {:?}", w.shape(), u.shape(), v.shape()),
        ));
    }
    Ok(())
}

fn column_norms(m: &DenseMatrix) -> Vec<f64> {
    (0..m.cols()).map(|j| norm(&m.column(j))).collect()
}

/// Cosines closer than this are ties; the lowest subcomponent index wins, so
/// the assignment does not flip on rounding.
const COSINE_TIE: f64 = 1e-12;

/// For every column `j` of `w`, the maximum over `c` of the signed cosine
/// between `U[:, c]·V[c, j]` and `W[:, j]`.
pub fn mmcs(w: &DenseMatrix, u: &DenseMatrix, v: &DenseMatrix) -> Result<MmcsResult> {
    check_factors("mmcs", w, u, v)?;
    let u_norms = column_norms(u);
    let w_norms = column_norms(w);
    // uᵀ w: (C × d_out)(d_out × n)
    let uw = u.matmul_tn(w)?;
    let mut out = MmcsResult {
        mean: f64::NAN,
        per_feature: Vec::new(),
        best: Vec::new(),
        features: Vec::new(),
        excluded: Vec::new(),
    };
    for j in 0..w.cols() {
        if w_norms[j] == 0.0 {
            out.excluded.push(j);
            continue;
        }
        let mut best = (f64::NEG_INFINITY, 0);
        for c in 0..u.cols() {
            let scale = v.get(c, j);
            let norm = u_norms[c] * scale.abs();
            // A zero contribution has no direction; count it as orthogonal.
            let cos = if norm == 0.0 {
                0.0
            } else {
                scale * uw.get(c, j) / (norm * w_norms[j])
            };
            if cos > best.0 + COSINE_TIE {
                best = (cos, c);
            }
        }
        out.per_feature.push(best.0.min(1.0));
        out.best.push(best.1);
        out.features.push(j);
    }
    if !out.per_feature.is_empty() {
        out.mean = out.per_feature.iter().sum::<f64>() / out.per_feature.len() as f64;
    }
    Ok(out)
}

/// `‖U[:, mcs(j)]·V[mcs(j), j]‖ / ‖W[:, j]‖` averaged over columns, using
/// the assignment from [`mmcs`].
pub fn ml2r(
    w: &DenseMatrix,
    u: &DenseMatrix,
    v: &DenseMatrix,
    assignment: &MmcsResult,
) -> Result<Ml2rResult> {
    check_factors("ml2r", w, u, v)?;
    let u_norms = column_norms(u);
    let w_norms = column_norms(w);
    let per_feature: Vec<f64> = assignment
        .features
        .iter()
        .zip(&assignment.best)
        .map(|(&j, &c)| u_norms[c] * v.get(c, j).abs() / w_norms[j])
        .collect();
    let mean = if per_feature.is_empty() {
        f64::NAN
    } else {
        per_feature.iter().sum::<f64>() / per_feature.len() as f64
    };
    Ok(Ml2rResult {
        mean,
        per_feature,
        features: assignment.features.clone(),
        excluded: assignment.excluded.clone(),
    })
}

fn check_feature(model: &ResidualMlpModel, feature: usize) -> Result<()> {
    if feature >= model.n_features() {
        return Err(Error::InvalidArgument(format!(
            "feature {feature} out of range for {} features",
            model.n_features()
        )));
    }
    Ok(())
}

/// `(W_U[i, :]·W_out) ⊙ (W_in·W_E[:, i])` over all neurons, layers
/// concatenated in order.
pub fn neuron_contrib_target(model: &ResidualMlpModel, feature: usize) -> Result<Vec<f64>> {
    check_feature(model, feature)?;
    let e = model.embed.column(feature);
    let mut out = Vec::with_capacity(model.total_neurons());
    for b in &model.blocks {
        let input = mat_vec(&b.w_in, &e);
        let output = vec_mat(&e, &b.w_out);
        out.extend(input.iter().zip(&output).map(|(a, o)| a * o));
    }
    Ok(out)
}

/// Subcomponent analogue of [`neuron_contrib_target`]: the output path uses
/// the full reconstruction of `W_out`, the input path a single `W_in`
/// subcomponent. Per layer, the subcomponent with the largest summed
/// contribution is chosen.
pub fn neuron_contrib_subcomponent(
    model: &ResidualMlpModel,
    comps: &SubcomponentSet,
    feature: usize,
) -> Result<Vec<f64>> {
    check_feature(model, feature)?;
    if comps.n_layers() != 2 * model.blocks.len() {
        return Err(Error::shape(
            "neuron_contrib_subcomponent",
            format!(
                "{} factor pairs for {} blocks",
                comps.n_layers(),
                model.blocks.len()
            ),
        ));
    }
    let e = model.embed.column(feature);
    let mut out = Vec::with_capacity(model.total_neurons());
    for l in 0..model.blocks.len() {
        let (u_in, v_in) = (&comps.u[2 * l], &comps.v[2 * l]);
        let w_out = comps.reconstruction(2 * l + 1);
        let output = vec_mat(&e, &w_out);
        let proj = mat_vec(v_in, &e);
        let mut best: Option<(f64, Vec<f64>)> = None;
        for (m, &pm) in proj.iter().enumerate() {
            let contrib: Vec<f64> = (0..u_in.rows())
                .map(|k| output[k] * u_in.get(k, m) * pm)
                .collect();
            let total: f64 = contrib.iter().sum();
            if best.as_ref().is_none_or(|(t, _)| total > *t) {
                best = Some((total, contrib));
            }
        }
        match best {
            Some((_, v)) => out.extend(v),
            None => out.extend(std::iter::repeat_n(0.0, u_in.rows())),
        }
    }
    Ok(out)
}

fn mat_vec(m: &DenseMatrix, x: &[f64]) -> Vec<f64> {
    (0..m.rows())
        .map(|i| m.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn vec_mat(x: &[f64], m: &DenseMatrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for (i, &xi) in x.iter().enumerate() {
        for (o, &mij) in out.iter_mut().zip(m.row(i)) {
            *o += xi * mij;
        }
    }
    out
}

/// Causal importances of one decomposed matrix for one-hot probes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceHeatmap {
    pub layer: String,
    /// `n_features × C`, columns reordered by `permutation` and clipped to
    /// `[0, 1]`.
    pub values: DenseMatrix,
    /// `permutation[k]` is the original index of displayed column `k`.
    pub permutation: Vec<usize>,
}

impl ImportanceHeatmap {
    /// Unpermuted value for feature `i`, subcomponent `c`.
    pub fn original(&self, i: usize, c: usize) -> f64 {
        let k = self
            .permutation
            .iter()
            .position(|&p| p == c)
            .expect("bijection");
        self.values.get(i, k)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("feature");
        for c in &self.permutation {
            s.push_str(&format!(",c{c}"));
        }
        s.push('\n');
        for i in 0..self.values.rows() {
            s.push_str(&i.to_string());
            for v in self.values.row(i) {
                s.push_str(&format!(",{v:.6}"));
            }
            s.push('\n');
        }
        s
    }
}

/// Greedy ordering: for each feature in turn, the remaining column with the
/// highest value (ties to the lowest index); leftover columns follow in
/// index order.
pub fn importance_permutation(g: &DenseMatrix) -> Vec<usize> {
    let c = g.cols();
    let mut used = vec![false; c];
    let mut perm = Vec::with_capacity(c);
    for i in 0..g.rows() {
        let mut best: Option<(f64, usize)> = None;
        for (k, _) in used.iter().enumerate().filter(|(_, u)| !**u) {
            let v = g.get(i, k);
            if best.is_none_or(|(b, _)| v > b) {
                best = Some((v, k));
            }
        }
        match best {
            Some((_, k)) => {
                used[k] = true;
                perm.push(k);
            }
            None => break,
        }
    }
    perm.extend((0..c).filter(|&k| !used[k]));
    perm
}

/// Builds a heatmap from raw importances.
pub fn heatmap_from_importances(layer: impl Into<String>, g: &DenseMatrix) -> ImportanceHeatmap {
    let clipped = g.map(|x| x.clamp(0.0, 1.0));
    let permutation = importance_permutation(&clipped);
    let values = DenseMatrix::from_fn(clipped.rows(), clipped.cols(), |i, k| {
        clipped.get(i, permutation[k])
    });
    ImportanceHeatmap {
        layer: layer.into(),
        values,
        permutation,
    }
}

/// One heatmap per decomposed matrix, probing each feature at `magnitude`.
pub fn importance_heatmaps(
    target: &TargetModel,
    dec: &Decomposition,
    magnitude: f64,
) -> Result<Vec<ImportanceHeatmap>> {
    let probes = one_hot_probes(target.n_features(), magnitude);
    let g = dec.causal_importances(target, &probes)?;
    Ok(target
        .sites()
        .into_iter()
        .zip(g)
        .map(|(site, g)| heatmap_from_importances(site.name, &g))
        .collect())
}

/// Per-feature statistics of one heatmap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeatmapSummary {
    pub layer: String,
    /// Original index of each feature's most important subcomponent.
    pub argmax: Vec<usize>,
    /// Displayed diagonal, i.e. the importance of the subcomponent the greedy
    /// ordering assigned to each feature.
    pub diagonal: Vec<f64>,
    pub mean_diagonal: f64,
    /// True when every feature has a distinct argmax.
    pub distinct_argmax: bool,
    /// Subcomponents with importance above 0.5, per feature.
    pub above_half: Vec<usize>,
    /// Mean of the `top_k` largest importances, per feature.
    pub top_k_mean: Vec<f64>,
    pub top_k: usize,
}

pub fn heatmap_summary(h: &ImportanceHeatmap, top_k: usize) -> HeatmapSummary {
    let (n, c) = h.values.shape();
    let mut argmax = Vec::with_capacity(n);
    let mut above_half = Vec::with_capacity(n);
    let mut top_k_mean = Vec::with_capacity(n);
    for i in 0..n {
        let row = h.values.row(i);
        let mut best = 0;
        for k in 1..c {
            if row[k] > row[best] {
                best = k;
            }
        }
        argmax.push(h.permutation.get(best).copied().unwrap_or(0));
        above_half.push(row.iter().filter(|&&v| v > 0.5).count());
        let mut sorted = row.to_vec();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let k = top_k.min(c).max(1);
        top_k_mean.push(sorted.iter().take(k).sum::<f64>() / k as f64);
    }
    let diagonal: Vec<f64> = (0..n.min(c)).map(|i| h.values.get(i, i)).collect();
    let mean_diagonal = if diagonal.is_empty() {
        0.0
    } else {
        diagonal.iter().sum::<f64>() / diagonal.len() as f64
    };
    let mut seen = argmax.clone();
    seen.sort_unstable();
    seen.dedup();
    HeatmapSummary {
        layer: h.layer.clone(),
        distinct_argmax: seen.len() == argmax.len(),
        argmax,
        diagonal,
        mean_diagonal,
        above_half,
        top_k_mean,
        top_k,
    }
}

/// Target and subcomponent neuron contributions for every feature, flattened
/// feature-major.
pub fn neuron_contrib_pairs(
    model: &ResidualMlpModel,
    comps: &SubcomponentSet,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..model.n_features() {
        x.extend(neuron_contrib_target(model, i)?);
        y.extend(neuron_contrib_subcomponent(model, comps, i)?);
    }
    Ok((x, y))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NonNegligible {
    pub count: usize,
    /// Frobenius norm of every rank-one term.
    pub norms: Vec<f64>,
}

/// Subcomponents of `layer` whose rank-one norm exceeds `threshold` times
/// the largest in that layer.
pub fn count_nonnegligible(
    comps: &SubcomponentSet,
    layer: usize,
    threshold: f64,
) -> Result<NonNegligible> {
    if !(threshold > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold must be > 0, got {threshold}"
        )));
    }
    if layer >= comps.n_layers() {
        return Err(Error::InvalidArgument(format!(
            "layer {layer} out of range"
        )));
    }
    let norms = comps.rank_one_norms(layer);
    let max = norms.iter().copied().fold(0.0, f64::max);
    let count = if max > 0.0 {
        norms.iter().filter(|&&n| n > threshold * max).count()
    } else {
        0
    };
    Ok(NonNegligible { count, norms })
}

/// Pearson correlation of two equal-length samples.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len()) as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}
