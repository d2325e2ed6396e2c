// SPDX-License-Identifier: MIT OR Apache-2.0

//! Evaluation of a trained decomposition.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::svg::{heatmap_svg, scatter_svg};
use crate::config::EvalSpec;
use crate::data::{sample_batch, DistributionSpec};
use crate::error::{Error, Result};
use crate::metrics::{
    count_nonnegligible, heatmap_summary, importance_heatmaps, ml2r, mmcs, neuron_contrib_pairs,
    pearson, HeatmapSummary, ImportanceHeatmap,
};
use crate::models::TargetModel;
use crate::rng::{stream, Purpose};
use crate::spd::{spd_loss_breakdown, Decomposition, SpdConfig, SpdLossBreakdown};
use crate::tensor::DenseMatrix;

/// Importances at or above this count as "reaching 1".
const FULL_IMPORTANCE: f64 = 0.999;
const TOP_K: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteReport {
    pub name: String,
    pub n_subcomponents: usize,
    pub nonnegligible: usize,
    /// Frobenius norm of every rank-one term.
    pub norms: Vec<f64>,
    pub mmcs: f64,
    pub ml2r: f64,
    pub mmcs_per_column: Vec<f64>,
    pub ml2r_per_column: Vec<f64>,
    /// Largest `|W - UV|` entry.
    pub max_reconstruction_error: f64,
    /// Largest `|W - Σ nonnegligible U_c V_c|` entry.
    pub max_nonnegligible_error: f64,
    pub heatmap: HeatmapSummary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuronContribReport {
    pub pearson: f64,
    pub n_points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub name: String,
    pub seed: u64,
    pub model_kind: String,
    pub scaled_down: bool,
    pub spd: SpdConfig,
    pub eval: EvalSpec,
    /// Losses on a held-out batch.
    pub eval_losses: SpdLossBreakdown,
    pub sites: Vec<SiteReport>,
    pub total_nonnegligible: usize,
    pub neuron_contrib: Option<NeuronContribReport>,
    pub warnings: Vec<String>,
}

impl DecompositionReport {
    pub fn site(&self, name: &str) -> Option<&SiteReport> {
        self.sites.iter().find(|s| s.name == name)
    }
}

/// Report plus the raw data behind its figures.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: DecompositionReport,
    pub heatmaps: Vec<ImportanceHeatmap>,
    /// `(target, subcomponent)` neuron contributions, residual MLPs only.
    pub neuron_contrib: Option<(Vec<f64>, Vec<f64>)>,
}

/// Fields identifying a run in its report.
#[derive(Clone, Debug)]
pub struct RunInfo<'a> {
    pub name: &'a str,
    pub seed: u64,
    pub scaled_down: bool,
}

/// Computes every metric. Never fails on a poor decomposition, only on
/// incompatible inputs.
pub fn evaluate(
    target: &TargetModel,
    dec: &Decomposition,
    spd: &SpdConfig,
    data: &DistributionSpec,
    eval: &EvalSpec,
    run: RunInfo<'_>,
) -> Result<Evaluation> {
    dec.check_compatible(target)?;
    if data.n_features != target.n_features() {
        return Err(Error::InvalidArgument(format!(
            "data has {} features but the target has {}",
            data.n_features,
            target.n_features()
        )));
    }
    let batch = sample_batch(
        data,
        eval.batch_size,
        &mut stream(run.seed, 0, Purpose::Eval),
    )?;
    let eval_losses = spd_loss_breakdown(target, dec, spd, &batch.inputs, run.seed, u64::MAX)?;
    let heatmaps = importance_heatmaps(target, dec, eval.probe_magnitude)?;

    let mut sites = Vec::new();
    for (l, ((name, w), hm)) in target.decomposed().into_iter().zip(&heatmaps).enumerate() {
        let (u, v) = (&dec.components.u[l], &dec.components.v[l]);
        let m = mmcs(w, u, v)?;
        let r = ml2r(w, u, v, &m)?;
        let nn = count_nonnegligible(&dec.components, l, eval.negligible_threshold)?;
        let max_norm = nn.norms.iter().copied().fold(0.0, f64::max);
        let mut kept = DenseMatrix::zeros(w.rows(), w.cols());
        for (c, &n) in nn.norms.iter().enumerate() {
            if max_norm > 0.0 && n > eval.negligible_threshold * max_norm {
                kept = kept.add(&dec.components.rank_one(l, c))?;
            }
        }
        sites.push(SiteReport {
            name,
            n_subcomponents: u.cols(),
            nonnegligible: nn.count,
            norms: nn.norms,
            mmcs: m.mean,
            ml2r: r.mean,
            mmcs_per_column: m.per_feature.clone(),
            ml2r_per_column: r.per_feature,
            max_reconstruction_error: max_abs_diff(w, &dec.components.reconstruction(l)),
            max_nonnegligible_error: max_abs_diff(w, &kept),
            heatmap: heatmap_summary(hm, TOP_K),
        });
    }

    let neuron_contrib = match target {
        TargetModel::ResidualMlp(m) => Some(neuron_contrib_pairs(m, &dec.components)?),
        TargetModel::Tms(_) => None,
    };
    let mut report = DecompositionReport {
        name: run.name.to_string(),
        seed: run.seed,
        model_kind: target.kind_name().to_string(),
        scaled_down: run.scaled_down,
        spd: spd.clone(),
        eval: eval.clone(),
        eval_losses,
        total_nonnegligible: sites.iter().map(|s| s.nonnegligible).sum(),
        sites,
        neuron_contrib: neuron_contrib.as_ref().map(|(x, y)| NeuronContribReport {
            pearson: pearson(x, y),
            n_points: x.len(),
        }),
        warnings: Vec::new(),
    };
    report.warnings = posthoc_warnings(&report, &heatmaps);
    Ok(Evaluation {
        report,
        heatmaps,
        neuron_contrib,
    })
}

fn max_abs_diff(a: &DenseMatrix, b: &DenseMatrix) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Hyperparameter hints drawn from the trained state.
fn posthoc_warnings(report: &DecompositionReport, heatmaps: &[ImportanceHeatmap]) -> Vec<String> {
    let mut w = Vec::new();
    if let Some(first) = heatmaps.first() {
        let n = first.values.rows();
        let reached = (0..n)
            .filter(|&i| {
                heatmaps
                    .iter()
                    .any(|h| h.values.row(i).iter().any(|&v| v >= FULL_IMPORTANCE))
            })
            .count();
        if 2 * reached < n {
            w.push(format!(
                "no causal importance reaches 1 for {} of {n} one-hot probes; beta3 may be too large",
                n - reached
            ));
        }
    }
    if report.eval_losses.faithfulness > 1e-3 {
        w.push(format!(
            "faithfulness loss {:.3e} is high; subcomponents do not sum to the target weights",
            report.eval_losses.faithfulness
        ));
    }
    for s in &report.sites {
        if s.nonnegligible == s.n_subcomponents {
            w.push(format!(
                "{}: all {} subcomponents are non-negligible; C may be too small or training too short",
                s.name, s.n_subcomponents
            ));
        }
    }
    w
}

/// Writes `report.json`, `metrics.csv`, per-site heatmap CSV/SVG and, for
/// residual MLPs, the neuron-contribution scatter. Returns the file names
/// written, relative to `dir`.
pub fn write_evaluation(ev: &Evaluation, dir: &Path) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    let mut put = |name: String, body: String| -> Result<()> {
        let path = dir.join(&name);
        std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        files.push(name);
        Ok(())
    };
    put(
        "report.json".into(),
        serde_json::to_string_pretty(&ev.report)? + "\n",
    )?;
    put("metrics.csv".into(), metrics_csv(&ev.report))?;
    for h in &ev.heatmaps {
        let stem = format!("heatmap_{}", h.layer.replace('.', "_"));
        put(format!("{stem}.csv"), h.to_csv())?;
        put(format!("{stem}.svg"), heatmap_svg(h))?;
    }
    if let Some((x, y)) = &ev.neuron_contrib {
        let mut csv = String::from("feature,neuron,target,subcomponent\n");
        let n_features = ev.heatmaps.first().map_or(1, |h| h.values.rows()).max(1);
        let per = (x.len() / n_features).max(1);
        for (k, (a, b)) in x.iter().zip(y).enumerate() {
            csv.push_str(&format!("{},{},{a:e},{b:e}\n", k / per, k % per));
        }
        put("neuron_contrib.csv".into(), csv)?;
        put(
            "neuron_contrib.svg".into(),
            scatter_svg(
                "Neuron contributions per feature",
                "target model",
                "best W_in subcomponent",
                x,
                y,
            ),
        )?;
    }
    Ok(files)
}

/// One row per decomposed matrix.
pub fn metrics_csv(r: &DecompositionReport) -> String {
    let mut s = String::from(
        "name,seed,site,n_subcomponents,nonnegligible,mmcs,ml2r,max_reconstruction_error,mean_diagonal_importance,distinct_argmax\n",
    );
    for site in &r.sites {
        s.push_str(&format!(
            "{},{},{},{},{},{:.6},{:.6},{:e},{:.6},{}\n",
            r.name,
            r.seed,
            site.name,
            site.n_subcomponents,
            site.nonnegligible,
            site.mmcs,
            site.ml2r,
            site.max_reconstruction_error,
            site.heatmap.mean_diagonal,
            site.heatmap.distinct_argmax
        ));
    }
    s
}
