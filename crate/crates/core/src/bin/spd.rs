// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spd_core::config::ExperimentConfig;
use spd_core::experiment::{
    decompose_stage, evaluate_checkpoints, load_target, reproduce, resolve_config, run_cell,
    train_target_stage, RunOptions, PRESETS,
};
use spd_core::Error;

const EXIT_CONFIG: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;
const EXIT_PARTIAL: u8 = 3;

#[derive(Parser)]
#[command(
    name = "spd",
    version,
    about = "Stochastic parameter decomposition of toy models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Output directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Zero wall-clock fields in manifests so reruns are byte-identical.
    #[arg(long)]
    deterministic: bool,
    /// Worker threads for suites.
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Progress line interval in steps (0 disables).
    #[arg(long, default_value_t = 1000)]
    progress_every: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Train a target model and write `target.ckpt`.
    TrainTarget {
        /// Preset name or TOML path.
        #[arg(long)]
        config: String,
        /// Overrides the first seed listed in the config.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Decompose a trained target and write `spd.ckpt`.
    Decompose {
        #[arg(long)]
        config: String,
        /// Target checkpoint; trained from scratch when omitted.
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Compute metrics and figures for an SPD checkpoint.
    Evaluate {
        #[arg(long)]
        spd: PathBuf,
        #[arg(long)]
        target: PathBuf,
        /// Overrides the config stored in the SPD checkpoint.
        #[arg(long)]
        config: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Train, decompose and evaluate every preset and seed of a suite.
    Reproduce {
        /// One of tms, tms_id, resid1, resid2, resid3, all, quick; or a
        /// single preset/TOML via --config.
        suite: Option<String>,
        #[arg(long)]
        config: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// List the built-in presets.
    Presets,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numerical(_) => EXIT_NUMERICAL,
        _ => EXIT_CONFIG,
    }
}

fn options(c: &Common) -> RunOptions {
    RunOptions {
        deterministic: c.deterministic,
        progress_every: c.progress_every,
    }
}

fn load(config: &str) -> Result<ExperimentConfig, Error> {
    let cfg = resolve_config(config)?;
    for w in cfg.warnings() {
        eprintln!("warning: {w}");
    }
    Ok(cfg)
}

fn seed_of(cfg: &ExperimentConfig, seed: Option<u64>) -> u64 {
    seed.unwrap_or(cfg.seeds[0])
}

fn print_json(v: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::TrainTarget {
            config,
            seed,
            common,
        } => {
            let cfg = load(&config)?;
            let seed = seed_of(&cfg, seed);
            let t = train_target_stage(&cfg, seed, &common.out, &options(&common))?;
            for w in &t.warnings {
                eprintln!("warning: {w}");
            }
            print_json(&serde_json::json!({
                "checkpoint": common.out.join("target.ckpt"),
                "final_loss": t.final_loss,
                "seed": seed,
            }));
        }
        Command::Decompose {
            config,
            target,
            seed,
            common,
        } => {
            let cfg = load(&config)?;
            let seed = seed_of(&cfg, seed);
            let model = match target {
                Some(p) => load_target(&p)?,
                None => train_target_stage(&cfg, seed, &common.out, &options(&common))?.model,
            };
            let s = decompose_stage(&cfg, &model, seed, &common.out, &options(&common))?;
            print_json(&serde_json::json!({
                "checkpoint": common.out.join("spd.ckpt"),
                "steps": s.steps,
                "seed": seed,
            }));
        }
        Command::Evaluate {
            spd,
            target,
            config,
            common,
        } => {
            let cfg = config.as_deref().map(load).transpose()?;
            let (report, _) = evaluate_checkpoints(&spd, &target, cfg.as_ref(), &common.out)?;
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
            print_json(&report);
        }
        Command::Reproduce {
            suite,
            config,
            seed,
            common,
        } => {
            let seeds = seed.map(|s| vec![s]);
            if let Some(config) = config {
                let cfg = load(&config)?;
                let mut failed = 0;
                for s in seeds.clone().unwrap_or_else(|| cfg.seeds.clone()) {
                    let dir = common.out.join(&cfg.name).join(format!("seed_{s}"));
                    match run_cell(&cfg, s, &dir, &options(&common)) {
                        Ok(c) => {
                            eprintln!("{} seed {s}: {}", cfg.name, Path::new(&c.dir).display())
                        }
                        Err(e) => {
                            eprintln!("{} seed {s} failed: {e}", cfg.name);
                            failed += 1;
                        }
                    }
                }
                return Ok(if failed > 0 { EXIT_PARTIAL } else { 0 });
            }
            let Some(suite) = suite else {
                return Err(Error::config("suite", "name a suite or pass --config"));
            };
            let outcome = reproduce(
                &suite,
                &common.out,
                common.threads,
                seeds.as_deref(),
                &options(&common),
            )?;
            println!("{}", common.out.join("summary.md").display());
            if outcome.failures() > 0 {
                eprintln!(
                    "{} of {} cells failed",
                    outcome.failures(),
                    outcome.cells.len()
                );
                return Ok(EXIT_PARTIAL);
            }
        }
        Command::Presets => {
            for (name, _) in PRESETS {
                println!("{name}");
            }
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
