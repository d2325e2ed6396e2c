// SPDX-License-Identifier: MIT OR Apache-2.0

//! Train, decompose and evaluate, one (config, seed) cell at a time.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde_json::json;

use super::manifest::{record, sha256_hex, FileRecord, RunManifest, Timings};
use super::report::{evaluate, write_evaluation, DecompositionReport, RunInfo};
use crate::checkpoint::{target_from_checkpoint, target_to_checkpoint, Checkpoint};
use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::models::TargetModel;
use crate::spd::{Decomposition, SpdConfig, SpdTrainer, LOSS_CSV_HEADER};
use crate::train::train_target;

pub const TARGET_CKPT: &str = "target.ckpt";
pub const SPD_CKPT: &str = "spd.ckpt";
pub const TARGET_LOSS_CSV: &str = "target_loss.csv";
pub const SPD_LOSS_CSV: &str = "spd_loss.csv";

/// Options shared by every stage.
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Zero wall-clock fields so identical inputs give identical files.
    pub deterministic: bool,
    /// Progress lines on stderr every this many steps; 0 disables them.
    pub progress_every: u64,
}

/// Step/ETA reporter writing to stderr.
struct Progress {
    label: String,
    total: u64,
    every: u64,
    start: Instant,
}

impl Progress {
    fn new(label: String, total: u64, every: u64) -> Self {
        Self {
            label,
            total,
            every,
            start: Instant::now(),
        }
    }

    fn tick(&self, step: u64, msg: impl FnOnce() -> String) {
        if self.every == 0 || (!(step + 1).is_multiple_of(self.every) && step + 1 != self.total) {
            return;
        }
        let done = step + 1;
        let elapsed = self.start.elapsed().as_secs_f64();
        let eta = elapsed / done as f64 * (self.total - done) as f64;
        eprintln!(
            "[{}] step {done}/{} {} (elapsed {elapsed:.0}s, eta {eta:.0}s)",
            self.label,
            self.total,
            msg()
        );
    }
}

pub fn config_hash(cfg: &ExperimentConfig) -> Result<String> {
    Ok(sha256_hex(cfg.to_toml_string()?.as_bytes()))
}

fn write_file(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn run_meta(cfg: &ExperimentConfig, seed: u64) -> Result<serde_json::Value> {
    Ok(json!({ "experiment": serde_json::to_value(cfg)?, "seed": seed }))
}

/// Result of the target stage.
#[derive(Clone, Debug)]
pub struct TargetStage {
    pub model: TargetModel,
    pub final_loss: Option<f64>,
    pub warnings: Vec<String>,
    pub seconds: f64,
}

/// Trains the target and writes `target.ckpt` and `target_loss.csv` into
/// `out`. On divergence the loss curve so far is still written.
pub fn train_target_stage(
    cfg: &ExperimentConfig,
    seed: u64,
    out: &Path,
    opts: &RunOptions,
) -> Result<TargetStage> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let start = Instant::now();
    let mut model = cfg.model.build(seed);
    let progress = Progress::new(
        format!("{} seed {seed} target", cfg.name),
        cfg.target.steps,
        opts.progress_every,
    );
    let mut losses = Vec::new();
    let result = train_target(
        &mut model,
        &cfg.distribution(),
        &cfg.target,
        seed,
        |s, l| {
            losses.push(l);
            progress.tick(s, || format!("loss {l:.4e}"));
        },
    );
    let mut csv = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        csv.push_str(&format!("{i},{l:e}\n"));
    }
    write_file(&out.join(TARGET_LOSS_CSV), &csv)?;
    let curve = result?;
    target_to_checkpoint(&model, run_meta(cfg, seed)?).save(&out.join(TARGET_CKPT))?;
    let final_loss = curve.tail_mean(100);
    let mut warnings = Vec::new();
    if let (Some(ceiling), Some(loss)) = (cfg.target.loss_ceiling, final_loss) {
        if loss > ceiling {
            warnings.push(format!(
                "target loss {loss:.4e} exceeds the expected ceiling {ceiling:.4e}"
            ));
        }
    }
    Ok(TargetStage {
        model,
        final_loss,
        warnings,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn load_target(path: &Path) -> Result<TargetModel> {
    target_from_checkpoint(&Checkpoint::load(path)?).map_err(|e| with_path(e, path))
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Checkpoint { reason, .. } => Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        },
        other => other,
    }
}

/// Result of the SPD stage.
#[derive(Clone, Debug)]
pub struct SpdStage {
    pub decomposition: Decomposition,
    pub seconds: f64,
    pub steps: u64,
}

/// Decomposes `target` and writes `spd.ckpt` and `spd_loss.csv` into `out`.
/// On a numerical failure the last finite decomposition is still saved
/// before the error is returned.
pub fn decompose_stage(
    cfg: &ExperimentConfig,
    target: &TargetModel,
    seed: u64,
    out: &Path,
    opts: &RunOptions,
) -> Result<SpdStage> {
    if !cfg.model.matches(target) {
        return Err(Error::shape(
            "decompose",
            format!(
                "target checkpoint does not match the `{}` model spec",
                cfg.name
            ),
        ));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let start = Instant::now();
    let mut trainer = SpdTrainer::new(target.clone(), cfg.spd.clone(), cfg.distribution(), seed)?;
    let progress = Progress::new(
        format!("{} seed {seed} spd", cfg.name),
        cfg.spd.steps,
        opts.progress_every,
    );
    let mut csv = format!("{LOSS_CSV_HEADER}\n");
    let result = trainer.run(|s, b, _| {
        csv.push_str(&b.csv_row(s));
        csv.push('\n');
        progress.tick(s, || b.to_string());
    });
    write_file(&out.join(SPD_LOSS_CSV), &csv)?;
    trainer
        .decomposition
        .to_checkpoint(target, &cfg.spd, run_meta(cfg, seed)?)?
        .save(&out.join(SPD_CKPT))?;
    result?;
    Ok(SpdStage {
        steps: trainer.steps_taken(),
        seconds: start.elapsed().as_secs_f64(),
        decomposition: trainer.decomposition,
    })
}

/// Everything `evaluate` needs from an SPD checkpoint.
#[derive(Clone, Debug)]
pub struct LoadedSpd {
    pub target: TargetModel,
    pub decomposition: Decomposition,
    pub spd: SpdConfig,
    pub experiment: Option<ExperimentConfig>,
    pub seed: u64,
}

pub fn load_spd(path: &Path) -> Result<LoadedSpd> {
    let ck = Checkpoint::load(path)?;
    let (target, decomposition, spd) =
        Decomposition::from_checkpoint(&ck).map_err(|e| with_path(e, path))?;
    let run = &ck.meta["run"];
    let experiment = serde_json::from_value(run["experiment"].clone()).ok();
    Ok(LoadedSpd {
        target,
        decomposition,
        spd,
        experiment,
        seed: run["seed"].as_u64().unwrap_or(0),
    })
}

/// Evaluates an SPD checkpoint against a separately stored target. The two
/// must hold identical target weights.
pub fn evaluate_checkpoints(
    spd_path: &Path,
    target_path: &Path,
    config: Option<&ExperimentConfig>,
    out: &Path,
) -> Result<(DecompositionReport, Vec<String>)> {
    let loaded = load_spd(spd_path)?;
    let target = load_target(target_path)?;
    if target != loaded.target {
        return Err(Error::InvalidArgument(format!(
            "{} was not decomposed from {}: target weights differ",
            spd_path.display(),
            target_path.display()
        )));
    }
    let cfg = config.or(loaded.experiment.as_ref()).ok_or_else(|| {
        Error::config(
            "config",
            "the SPD checkpoint carries no experiment config; pass --config",
        )
    })?;
    if !cfg.model.matches(&target) {
        return Err(Error::shape(
            "evaluate",
            format!("config `{}` does not match the checkpoints", cfg.name),
        ));
    }
    let ev = evaluate(
        &target,
        &loaded.decomposition,
        &loaded.spd,
        &cfg.distribution(),
        &cfg.eval,
        RunInfo {
            name: &cfg.name,
            seed: loaded.seed,
            scaled_down: cfg.scaled_down,
        },
    )?;
    let files = write_evaluation(&ev, out)?;
    Ok((ev.report, files))
}

/// Outcome of a full cell.
#[derive(Clone, Debug)]
pub struct CellResult {
    pub report: DecompositionReport,
    pub manifest: RunManifest,
    pub dir: PathBuf,
}

/// Runs train → decompose → evaluate into `out` and writes the manifest.
pub fn run_cell(
    cfg: &ExperimentConfig,
    seed: u64,
    out: &Path,
    opts: &RunOptions,
) -> Result<CellResult> {
    let t = train_target_stage(cfg, seed, out, opts)?;
    let s = decompose_stage(cfg, &t.model, seed, out, opts)?;
    let start = Instant::now();
    let ev = evaluate(
        &t.model,
        &s.decomposition,
        &cfg.spd,
        &cfg.distribution(),
        &cfg.eval,
        RunInfo {
            name: &cfg.name,
            seed,
            scaled_down: cfg.scaled_down,
        },
    )?;
    let mut report = ev.report.clone();
    report.warnings.extend(t.warnings.iter().cloned());
    report.warnings.extend(cfg.warnings());
    let ev = super::report::Evaluation { report, ..ev };
    let mut outputs = vec![TARGET_LOSS_CSV.to_string(), SPD_LOSS_CSV.to_string()];
    outputs.extend(write_evaluation(&ev, out)?);
    let eval_seconds = start.elapsed().as_secs_f64();
    let timings = if opts.deterministic {
        Timings {
            spd_steps: s.steps,
            ..Timings::default()
        }
    } else {
        Timings {
            target_seconds: t.seconds,
            spd_seconds: s.seconds,
            eval_seconds,
            spd_steps: s.steps,
            spd_seconds_per_step: if s.steps > 0 {
                s.seconds / s.steps as f64
            } else {
                0.0
            },
        }
    };
    let records = |names: &[String]| -> Result<Vec<FileRecord>> {
        names.iter().map(|n| record(out, n)).collect()
    };
    let manifest = RunManifest {
        name: cfg.name.clone(),
        config_hash: config_hash(cfg)?,
        seed,
        deterministic: opts.deterministic,
        checkpoints: records(&[TARGET_CKPT.to_string(), SPD_CKPT.to_string()])?,
        outputs: records(&outputs)?,
        timings,
    };
    manifest.write(out)?;
    Ok(CellResult {
        report: ev.report,
        manifest,
        dir: out.to_path_buf(),
    })
}
