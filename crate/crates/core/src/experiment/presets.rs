// SPDX-License-Identifier: MIT OR Apache-2.0

//! Built-in experiment configs and suites.

use std::path::Path;

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};

macro_rules! preset {
    ($name:literal) => {
        (
            $name,
            include_str!(concat!("../../presets/", $name, ".toml")),
        )
    };
}

/// `(name, TOML text)` for every shipped preset.
pub const PRESETS: &[(&str, &str)] = &[
    preset!("tms_5_2"),
    preset!("tms_5_2_id"),
    preset!("tms_40_10"),
    preset!("tms_40_10_id"),
    preset!("resid_mlp_1layer"),
    preset!("resid_mlp_2layer"),
    preset!("resid_mlp_3layer"),
    preset!("quick_tms_5_2"),
    preset!("quick_tms_5_2_id"),
    preset!("quick_resid_mlp"),
];

pub const SUITES: &[&str] = &[
    "tms", "tms_id", "resid1", "resid2", "resid3", "all", "quick",
];

pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|(n, _)| *n).collect()
}

/// Looks up a preset. `<name>_spd` is accepted as an alias for `<name>`,
/// since one file carries both the target and the SPD recipe.
pub fn preset(name: &str) -> Result<ExperimentConfig> {
    let key = name.strip_suffix("_spd").unwrap_or(name);
    let (_, text) = PRESETS.iter().find(|(n, _)| *n == key).ok_or_else(|| {
        Error::config(
            "config",
            format!(
                "unknown preset `{name}`; available: {}",
                preset_names().join(", ")
            ),
        )
    })?;
    ExperimentConfig::from_toml_str(text)
}

/// A path to a TOML file if one exists, otherwise a preset name.
pub fn resolve_config(arg: &str) -> Result<ExperimentConfig> {
    let path = Path::new(arg);
    if path.is_file() {
        ExperimentConfig::load(path)
    } else if arg.ends_with(".toml") {
        Err(Error::config("config", format!("file `{arg}` not found")))
    } else {
        preset(arg)
    }
}

/// Presets run by a suite.
pub fn suite_presets(suite: &str) -> Result<Vec<&'static str>> {
    Ok(match suite {
        "tms" => vec!["tms_5_2", "tms_40_10"],
        "tms_id" => vec!["tms_5_2_id", "tms_40_10_id"],
        "resid1" => vec!["resid_mlp_1layer"],
        "resid2" => vec!["resid_mlp_2layer"],
        "resid3" => vec!["resid_mlp_3layer"],
        "all" => vec![
            "tms_5_2",
            "tms_40_10",
            "tms_5_2_id",
            "tms_40_10_id",
            "resid_mlp_1layer",
            "resid_mlp_2layer",
            "resid_mlp_3layer",
        ],
        "quick" => vec!["quick_tms_5_2", "quick_tms_5_2_id", "quick_resid_mlp"],
        other => {
            return Err(Error::config(
                "suite",
                format!(
                    "unknown suite `{other}`; valid suites: {}",
                    SUITES.join(", ")
                ),
            ))
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelSpec;
    use crate::optim::{OptimizerKind, Schedule};

    #[test]
    fn every_preset_parses_and_round_trips() {
        for name in preset_names() {
            let cfg = preset(name).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert_eq!(cfg.name, name);
            let again = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
            assert_eq!(again, cfg);
        }
    }

    #[test]
    fn every_suite_resolves() {
        for s in SUITES {
            for p in suite_presets(s).unwrap() {
                preset(p).unwrap();
            }
        }
        let err = suite_presets("nope").unwrap_err().to_string();
        for s in SUITES {
            assert!(err.contains(s), "{err}");
        }
    }

    #[test]
    fn tms_5_2_recipe() {
        let c = preset("tms_5_2_spd").unwrap();
        assert_eq!((c.target.steps, c.target.batch_size), (10_000, 1024));
        assert_eq!(c.target.optimizer.kind, OptimizerKind::AdamW);
        assert_eq!(c.target.optimizer.schedule, Schedule::Constant);
        assert_eq!(
            (c.target.optimizer.lr, c.target.optimizer.weight_decay),
            (5e-3, 0.01)
        );
        assert_eq!(c.data.feature_prob, 0.05);
        let s = &c.spd;
        assert_eq!((s.beta1, s.beta2, s.beta3, s.p), (1.0, 1.0, 3e-3, 1.0));
        assert_eq!((s.n_subcomponents, s.d_gate, s.n_samples), (20, 16, 1));
        assert_eq!((s.steps, s.batch_size), (40_000, 4096));
        assert_eq!(s.optimizer.kind, OptimizerKind::Adam);
        assert_eq!(
            (s.optimizer.lr, s.optimizer.schedule),
            (1e-3, Schedule::Cosine)
        );
    }

    #[test]
    fn tms_40_10_recipe() {
        let c = preset("tms_40_10").unwrap();
        assert_eq!(c.target.batch_size, 8192);
        assert_eq!((c.spd.beta3, c.spd.p), (1e-4, 2.0));
        let id = preset("tms_40_10_id").unwrap();
        assert!(matches!(
            id.model,
            ModelSpec::Tms {
                hidden_identity: true,
                n_features: 40,
                n_hidden: 10
            }
        ));
    }

    #[test]
    fn residual_recipes() {
        let c = preset("resid_mlp_1layer").unwrap();
        assert!(matches!(
            c.model,
            ModelSpec::ResidualMlp {
                n_features: 100,
                d_resid: 1000,
                n_layers: 1,
                neurons_per_layer: 50
            }
        ));
        assert_eq!(
            (c.data.feature_prob, c.data.value_min, c.data.value_max),
            (0.01, Some(-1.0), Some(1.0))
        );
        assert_eq!((c.target.batch_size, c.target.optimizer.lr), (2048, 3e-3));
        assert_eq!(c.target.optimizer.schedule, Schedule::Cosine);
        let s = &c.spd;
        assert_eq!(
            (
                s.optimizer.lr,
                s.beta3,
                s.p,
                s.n_subcomponents,
                s.steps,
                s.d_gate
            ),
            (2e-3, 1e-5, 2.0, 100, 30_000, 16)
        );
        assert_eq!(s.optimizer.schedule, Schedule::Constant);

        let c = preset("resid_mlp_2layer").unwrap();
        assert!(matches!(
            c.model,
            ModelSpec::ResidualMlp {
                n_layers: 2,
                neurons_per_layer: 25,
                ..
            }
        ));
        assert_eq!(
            (c.spd.optimizer.lr, c.spd.n_subcomponents, c.spd.steps),
            (1e-3, 400, 50_000)
        );

        let c = preset("resid_mlp_3layer_spd").unwrap();
        assert!(matches!(
            c.model,
            ModelSpec::ResidualMlp {
                n_features: 102,
                n_layers: 3,
                neurons_per_layer: 17,
                ..
            }
        ));
        assert_eq!(
            (
                c.spd.beta3,
                c.spd.n_subcomponents,
                c.spd.d_gate,
                c.spd.steps
            ),
            (0.5e-5, 500, 128, 200_000)
        );
    }

    #[test]
    fn quick_presets_are_flagged() {
        for name in ["quick_tms_5_2", "quick_tms_5_2_id", "quick_resid_mlp"] {
            assert!(preset(name).unwrap().scaled_down, "{name}");
        }
        let q = preset("quick_resid_mlp").unwrap();
        assert!(matches!(
            q.model,
            ModelSpec::ResidualMlp {
                n_features: 20,
                d_resid: 200,
                n_layers: 1,
                neurons_per_layer: 10
            }
        ));
        assert_eq!(q.spd.n_subcomponents, 20);
    }

    #[test]
    fn resolve_prefers_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.toml");
        let mut cfg = preset("tms_5_2").unwrap();
        cfg.name = "custom".into();
        std::fs::write(&path, cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(
            resolve_config(path.to_str().unwrap()).unwrap().name,
            "custom"
        );
        assert_eq!(resolve_config("tms_5_2").unwrap().name, "tms_5_2");
        assert!(resolve_config("/no/such.toml").is_err());
    }
}
