//! `slicegen`: phantom data, target selection, training, evaluation,
//! ablations and longitudinal harmonization from the command line.
//!
//! Every command writes only below `--out` and finishes with a
//! `manifest.json`. Outputs other than the manifest are byte-identical across
//! reruns with the same inputs, config and seed.

mod commands;
mod config;
mod data;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use slicegen_core::harmonize::FatMethod;
use slicegen_core::targetsel::SelectionMethod;

use config::{Config, ConfigError};
use manifest::{InputHasher, Manifest};

#[derive(Parser)]
#[command(name = "slicegen", version, about = "Slice-level CT synthesis on phantom data")]
struct Cli {
    /// TOML config; sections: dataset, cohort, model, train, target, evaluate, ablation, harmonize.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config value, e.g. `--set train.beta=0.01`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Out {
    /// Directory receiving every output of the run.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Seed {
    #[arg(long)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Write phantom volumes, their truth table and optionally a longitudinal cohort.
    PhantomGen {
        #[command(flatten)]
        out: Out,
        #[command(flatten)]
        seed: Seed,
        #[arg(long)]
        subjects: Option<usize>,
        /// Also write the longitudinal cohort from `[cohort]`.
        #[arg(long)]
        cohort: bool,
        #[arg(long)]
        cohort_subjects: Option<usize>,
    },
    /// Pick each subject's target slice against a reference slice.
    SelectTarget {
        #[arg(long)]
        data: PathBuf,
        /// Dataset holding the reference subject; defaults to `--data`.
        #[arg(long)]
        reference_data: Option<PathBuf>,
        #[arg(long, value_parser = parse_method)]
        method: Option<SelectionMethod>,
        #[command(flatten)]
        out: Out,
    },
    /// Train a model from scratch.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Selection manifest overriding the dataset's true targets.
        #[arg(long)]
        targets: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        beta: Option<f64>,
        #[command(flatten)]
        out: Out,
        #[command(flatten)]
        seed: Seed,
    },
    /// Continue training a checkpoint on new data at the fine-tuning rate.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        targets: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
        #[command(flatten)]
        out: Out,
        #[command(flatten)]
        seed: Seed,
    },
    /// Score generated slices against true targets.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        targets: Option<PathBuf>,
        #[command(flatten)]
        out: Out,
        #[command(flatten)]
        seed: Seed,
    },
    /// Train one model per adversarial weight and compare sharpness and fidelity.
    AblateBeta {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        test_data: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        /// Comma-separated list, e.g. `0,0.01`.
        #[arg(long, value_delimiter = ',')]
        betas: Option<Vec<f64>>,
        #[command(flatten)]
        out: Out,
        #[command(flatten)]
        seed: Seed,
    },
    /// Train over the pairing grid; grid seeds are offsets from `--seed`.
    AblateDistance {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        test_data: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        #[command(flatten)]
        out: Out,
        #[command(flatten)]
        seed: Seed,
    },
    /// Harmonize a longitudinal cohort and test the change in fat-area variation.
    Harmonize {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Cohort directory, or a dataset directory containing `cohort/`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_parser = parse_fat_method)]
        fat_method: Option<FatMethod>,
        #[arg(long)]
        panels: bool,
        #[command(flatten)]
        out: Out,
        #[command(flatten)]
        seed: Seed,
    },
}

fn parse_method(s: &str) -> Result<SelectionMethod, String> {
    serde_json::from_value(serde_json::Value::String(s.into())).map_err(|_| "expected bpr, registration or semi_bpr".into())
}

fn parse_fat_method(s: &str) -> Result<FatMethod, String> {
    serde_json::from_value(serde_json::Value::String(s.into()))
        .map_err(|_| "expected threshold, fuzzy_cmeans or external_mask".into())
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] slicegen_core::Error),
    #[error("writing manifest: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Usage(_) => 1,
            CliError::Core(e) if e.is_validation() => 1,
            _ => 2,
        }
    }
}

/// What a run reads, beyond its config and seed.
struct Plan {
    name: &'static str,
    out: PathBuf,
    seed: Option<u64>,
    inputs: Vec<(&'static str, PathBuf)>,
}

fn plan(cmd: &Command, cfg: &mut Config) -> Plan {
    let p = |name, out: &Out, seed: Option<&Seed>, inputs: Vec<(&'static str, &PathBuf)>| Plan {
        name,
        out: out.out.clone(),
        seed: seed.map(|s| s.seed),
        inputs: inputs.into_iter().map(|(l, p)| (l, p.clone())).collect(),
    };
    match cmd {
        Command::PhantomGen { out, seed, subjects, cohort, cohort_subjects } => {
            if let Some(n) = subjects {
                cfg.dataset.subjects = *n;
            }
            cfg.dataset.with_cohort |= *cohort;
            if let Some(n) = cohort_subjects {
                cfg.cohort.n_subjects = *n;
                cfg.dataset.with_cohort = true;
            }
            p("phantom-gen", out, Some(seed), vec![])
        }
        Command::SelectTarget { data, reference_data, method, out } => {
            if let Some(m) = method {
                cfg.target.method = *m;
            }
            let mut inputs = vec![("data", data)];
            inputs.extend(reference_data.iter().map(|r| ("reference", r)));
            p("select-target", out, None, inputs)
        }
        Command::Train { data, targets, steps, beta, out, seed } => {
            cfg.train.seed = seed.seed;
            if let Some(n) = steps {
                cfg.train.max_steps = *n;
            }
            if let Some(b) = beta {
                cfg.train.beta = *b;
            }
            let mut inputs = vec![("data", data)];
            inputs.extend(targets.iter().map(|t| ("targets", t)));
            p("train", out, Some(seed), inputs)
        }
        Command::Finetune { checkpoint, data, targets, steps, out, seed } => {
            cfg.train.seed = seed.seed;
            if let Some(n) = steps {
                cfg.train.max_steps = *n;
            }
            let mut inputs = vec![("checkpoint", checkpoint), ("data", data)];
            inputs.extend(targets.iter().map(|t| ("targets", t)));
            p("finetune", out, Some(seed), inputs)
        }
        Command::Evaluate { checkpoint, data, targets, out, seed } => {
            let mut inputs = vec![("checkpoint", checkpoint), ("data", data)];
            inputs.extend(targets.iter().map(|t| ("targets", t)));
            p("evaluate", out, Some(seed), inputs)
        }
        Command::AblateBeta { data, test_data, steps, betas, out, seed } => {
            cfg.train.seed = seed.seed;
            if let Some(n) = steps {
                cfg.train.max_steps = *n;
            }
            if let Some(b) = betas {
                cfg.ablation.betas = b.clone();
            }
            p("ablate-beta", out, Some(seed), vec![("data", data), ("test-data", test_data)])
        }
        Command::AblateDistance { data, test_data, steps, out, seed } => {
            cfg.train.seed = seed.seed;
            if let Some(n) = steps {
                cfg.train.max_steps = *n;
            }
            p("ablate-distance", out, Some(seed), vec![("data", data), ("test-data", test_data)])
        }
        Command::Harmonize { checkpoint, data, fat_method, panels, out, seed } => {
            if let Some(m) = fat_method {
                cfg.harmonize.fat_method = *m;
            }
            cfg.harmonize.panels |= *panels;
            p("harmonize", out, Some(seed), vec![("checkpoint", checkpoint), ("data", data)])
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let started = Instant::now();
    let mut cfg = Config::resolve(cli.config.as_deref(), std::env::vars(), &cli.overrides)?;
    let plan = plan(&cli.command, &mut cfg);
    for (label, path) in &plan.inputs {
        if !path.exists() {
            return Err(CliError::Usage(format!("--{label} {} does not exist", path.display())));
        }
    }
    let resolved = toml::to_string(&cfg).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut hasher = InputHasher::default();
    hasher.text("command", plan.name);
    hasher.text("config", &resolved);
    hasher.text("seed", &format!("{:?}", plan.seed));
    for (label, path) in &plan.inputs {
        hasher.path(label, path)?;
    }
    let input_hash = hasher.finish();

    let out = plan.out.as_path();
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("config.toml"), &resolved)?;
    dispatch(&cli.command, &cfg, out)?;
    Manifest::write(out, plan.name, cli.config.as_deref(), plan.seed, input_hash, started.elapsed())?;
    log::info!("{} finished in {:.1}s", plan.name, started.elapsed().as_secs_f64());
    Ok(())
}

fn dispatch(cmd: &Command, cfg: &Config, out: &Path) -> slicegen_core::Result<()> {
    match cmd {
        Command::PhantomGen { seed, .. } => commands::phantom_gen(cfg, out, seed.seed),
        Command::SelectTarget { data, reference_data, .. } => {
            commands::select_target(cfg, data, reference_data.as_deref(), out)
        }
        Command::Train { data, targets, .. } => commands::train_cmd(cfg, data, targets.as_deref(), out),
        Command::Finetune { checkpoint, data, targets, .. } => {
            commands::finetune_cmd(cfg, checkpoint, data, targets.as_deref(), out)
        }
        Command::Evaluate { checkpoint, data, targets, seed, .. } => {
            commands::evaluate(cfg, checkpoint, data, targets.as_deref(), out, seed.seed)
        }
        Command::AblateBeta { data, test_data, .. } => commands::ablate_beta(cfg, data, test_data, out),
        Command::AblateDistance { data, test_data, seed, .. } => {
            commands::ablate_distance(cfg, data, test_data, out, seed.seed)
        }
        Command::Harmonize { checkpoint, data, seed, .. } => commands::harmonize(cfg, checkpoint, data, out, seed.seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
