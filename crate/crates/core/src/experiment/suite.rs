// SPDX-License-Identifier: MIT OR Apache-2.0

//! Suite runner: presets × seeds on a pool of worker threads.

use std::collections::VecDeque;
use std::fmt::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use super::presets::{preset, suite_presets};
use super::report::DecompositionReport;
use super::runner::{run_cell, RunOptions};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};

/// One (preset, seed) cell's outcome.
#[derive(Clone, Debug)]
pub struct CellOutcome {
    pub preset: String,
    pub seed: u64,
    pub scaled_down: bool,
    pub dir: PathBuf,
    pub result: std::result::Result<DecompositionReport, String>,
}

#[derive(Clone, Debug)]
pub struct SuiteOutcome {
    pub suite: String,
    pub cells: Vec<CellOutcome>,
}

impl SuiteOutcome {
    pub fn failures(&self) -> usize {
        self.cells.iter().filter(|c| c.result.is_err()).count()
    }
}

/// Runs every cell of `suite` under `out/<preset>/seed_<s>`, then writes
/// `summary.md` and `summary.csv`. A failing cell does not stop the others.
pub fn reproduce(
    suite: &str,
    out: &Path,
    threads: usize,
    seeds: Option<&[u64]>,
    opts: &RunOptions,
) -> Result<SuiteOutcome> {
    let configs: Vec<ExperimentConfig> = suite_presets(suite)?
        .into_iter()
        .map(preset)
        .collect::<Result<_>>()?;
    run_configs(suite, &configs, out, threads, seeds, opts)
}

/// As [`reproduce`] for an explicit list of configs.
pub fn run_configs(
    suite: &str,
    configs: &[ExperimentConfig],
    out: &Path,
    threads: usize,
    seeds: Option<&[u64]>,
    opts: &RunOptions,
) -> Result<SuiteOutcome> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut queue = VecDeque::new();
    for (i, cfg) in configs.iter().enumerate() {
        for &seed in seeds.unwrap_or(&cfg.seeds) {
            queue.push_back((queue.len(), i, seed));
        }
    }
    let n_cells = queue.len();
    let queue = Mutex::new(queue);
    let results: Mutex<Vec<Option<CellOutcome>>> = Mutex::new(vec![None; n_cells]);
    std::thread::scope(|scope| {
        for _ in 0..threads.max(1).min(n_cells.max(1)) {
            scope.spawn(|| loop {
                let Some((slot, i, seed)) = queue.lock().expect("queue").pop_front() else {
                    break;
                };
                let cfg = &configs[i];
                let dir = out.join(&cfg.name).join(format!("seed_{seed}"));
                let result = run_cell(cfg, seed, &dir, opts)
                    .map(|c| c.report)
                    .map_err(|e| e.to_string());
                if let Err(e) = &result {
                    eprintln!("[{} seed {seed}] failed: {e}", cfg.name);
                }
                results.lock().expect("results")[slot] = Some(CellOutcome {
                    preset: cfg.name.clone(),
                    seed,
                    scaled_down: cfg.scaled_down,
                    dir,
                    result,
                });
            });
        }
    });
    let cells: Vec<CellOutcome> = results
        .into_inner()
        .expect("results")
        .into_iter()
        .map(|c| c.expect("every cell ran"))
        .collect();
    let outcome = SuiteOutcome {
        suite: suite.to_string(),
        cells,
    };
    let md = out.join("summary.md");
    std::fs::write(&md, summary_markdown(&outcome, out)).map_err(|e| Error::io(&md, e))?;
    let csv = out.join("summary.csv");
    std::fs::write(&csv, summary_csv(&outcome)).map_err(|e| Error::io(&csv, e))?;
    Ok(outcome)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Table with one row per preset and decomposed matrix: MMCS and ML2R as
/// mean ± sample stdev over successful seeds.
pub fn summary_markdown(s: &SuiteOutcome, out: &Path) -> String {
    let mut md = String::new();
    writeln!(md, "# Suite `{}`\n", s.suite).unwrap();
    writeln!(
        md,
        "{} of {} cells succeeded.\n",
        s.cells.len() - s.failures(),
        s.cells.len()
    )
    .unwrap();
    writeln!(
        md,
        "| Model | Matrix | Seeds | MMCS | ML2R | Non-negligible |"
    )
    .unwrap();
    writeln!(md, "|---|---|---|---|---|---|").unwrap();
    let mut presets: Vec<&str> = s.cells.iter().map(|c| c.preset.as_str()).collect();
    presets.dedup();
    for p in &presets {
        let ok: Vec<&DecompositionReport> = s
            .cells
            .iter()
            .filter(|c| c.preset == *p)
            .filter_map(|c| c.result.as_ref().ok())
            .collect();
        let scaled = s.cells.iter().any(|c| c.preset == *p && c.scaled_down);
        let label = if scaled {
            format!("{p} (scaled down, not a published recipe)")
        } else {
            p.to_string()
        };
        let Some(first) = ok.first() else {
            writeln!(md, "| {label} | - | 0 | failed | failed | - |").unwrap();
            continue;
        };
        for site in &first.sites {
            let pick = |f: fn(&super::report::SiteReport) -> f64| -> Vec<f64> {
                ok.iter()
                    .filter_map(|r| r.site(&site.name))
                    .map(f)
                    .collect()
            };
            let (mm, ms) = mean_std(&pick(|x| x.mmcs));
            let (lm, ls) = mean_std(&pick(|x| x.ml2r));
            let counts: Vec<String> = ok
                .iter()
                .filter_map(|r| r.site(&site.name))
                .map(|x| x.nonnegligible.to_string())
                .collect();
            writeln!(
                md,
                "| {label} | {} | {} | {mm:.3} ± {ms:.3} | {lm:.3} ± {ls:.3} | {} |",
                site.name,
                ok.len(),
                counts.join(", ")
            )
            .unwrap();
        }
    }
    writeln!(md, "\n## Cells\n").unwrap();
    for c in &s.cells {
        let rel = c
            .dir
            .strip_prefix(out)
            .unwrap_or(&c.dir)
            .display()
            .to_string();
        match &c.result {
            Ok(r) => {
                let figs: Vec<String> = r
                    .sites
                    .iter()
                    .map(|site| {
                        let stem = format!("heatmap_{}", site.name.replace('.', "_"));
                        format!("[{}]({rel}/{stem}.svg)", site.name)
                    })
                    .collect();
                write!(
                    md,
                    "- `{}` seed {}: heatmaps {}",
                    c.preset,
                    c.seed,
                    figs.join(", ")
                )
                .unwrap();
                if let Some(nc) = &r.neuron_contrib {
                    write!(
                        md,
                        ", [neuron contributions]({rel}/neuron_contrib.svg) (Pearson r = {:.4})",
                        nc.pearson
                    )
                    .unwrap();
                }
                md.push('\n');
                for w in &r.warnings {
                    writeln!(md, "  - warning: {w}").unwrap();
                }
            }
            Err(e) => writeln!(md, "- `{}` seed {}: FAILED: {e}", c.preset, c.seed).unwrap(),
        }
    }
    md
}

pub fn summary_csv(s: &SuiteOutcome) -> String {
    let mut csv =
        String::from("preset,seed,status,site,mmcs,ml2r,nonnegligible,n_subcomponents,error\n");
    for c in &s.cells {
        match &c.result {
            Ok(r) => {
                for site in &r.sites {
                    writeln!(
                        csv,
                        "{},{},ok,{},{:.6},{:.6},{},{},",
                        c.preset,
                        c.seed,
                        site.name,
                        site.mmcs,
                        site.ml2r,
                        site.nonnegligible,
                        site.n_subcomponents
                    )
                    .unwrap();
                }
            }
            Err(e) => writeln!(
                csv,
                "{},{},failed,,,,,,\"{}\"",
                c.preset,
                c.seed,
                e.replace('"', "'")
            )
            .unwrap(),
        }
    }
    csv
}
