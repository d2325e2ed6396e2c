// SPDX-License-Identifier: MIT OR Apache-2.0

//! Declarative experiment runner: presets, per-cell pipeline, reports and
//! suite aggregation.

pub mod manifest;
pub mod presets;
pub mod report;
pub mod runner;
pub mod suite;
pub mod svg;

pub use manifest::{RunManifest, Timings};
pub use presets::{preset, preset_names, resolve_config, suite_presets, PRESETS, SUITES};
pub use report::{
    evaluate, write_evaluation, DecompositionReport, Evaluation, RunInfo, SiteReport,
};
pub use runner::{
    decompose_stage, evaluate_checkpoints, load_spd, load_target, run_cell, train_target_stage,
    CellResult, RunOptions,
};
pub use suite::{reproduce, run_configs, CellOutcome, SuiteOutcome};
