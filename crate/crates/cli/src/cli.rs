//! Command-line interface.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use mcxtfc::basis::InitDistribution;
use mcxtfc::cvsim6::PulmResistance;

use crate::config::{Experiment, PulmonaryVariant, RunConfig, EXPERIMENT_NAMES};
use crate::error::{CliError, Result};
use crate::experiments::{default_out, run};
use crate::report;

/// Environment variable naming the default output root.
pub const OUT_ROOT_ENV: &str = "MCXTFC_OUT";

#[derive(Debug, Parser)]
#[command(name = "mcxtfc", version, about = "Physics-informed estimation experiments with Monte-Carlo uncertainty")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate the circulation model to a periodic steady state.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        cycles: Option<usize>,
        /// Use the flow-dependent pulmonary venous resistance.
        #[arg(long)]
        nonlinear: bool,
    },
    /// Run an experiment from a config file or from its defaults.
    Run {
        /// One of: simulate-cvsim, harmonic, harmonic-discrepancy, lambda-sweep,
        /// ablation, pulmonary-discrepancy, appendix-c. Optional with --config.
        experiment: Option<String>,
        #[command(flatten)]
        common: Common,
        /// Ablation scenario, Sc1..Sc6.
        #[arg(long)]
        scenario: Option<String>,
        /// Pulmonary discrepancy variant.
        #[arg(long, value_parser = ["linear", "algebraic", "inductive"])]
        variant: Option<String>,
        /// Harmonic basis initialisation U[-B, B].
        #[arg(long = "B", alias = "bound")]
        bound: Option<f64>,
        /// Print the resolved configuration and exit.
        #[arg(long)]
        print_config: bool,
    },
    /// Summarise all runs below a results directory.
    Report {
        /// Results directory (defaults to the output root).
        dir: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub reps: Option<usize>,
    /// Output directory; defaults to $MCXTFC_OUT/<experiment>.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads (default: all hardware threads).
    #[arg(long)]
    pub parallel: Option<usize>,
}

pub fn out_root() -> PathBuf {
    std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("results"))
}

fn base_config(common: &Common, experiment: Option<&str>) -> Result<RunConfig> {
    match (&common.config, experiment) {
        (Some(path), _) => {
            let cfg = RunConfig::load(path)?;
            if let Some(name) = experiment {
                let wanted = Experiment::default_for(name)?;
                if std::mem::discriminant(&wanted) != std::mem::discriminant(&cfg.experiment) {
                    return Err(CliError::Usage(format!(
                        "{} describes a {} run, not {name}",
                        path.display(),
                        cfg.experiment.label()
                    )));
                }
            }
            Ok(cfg)
        }
        (None, Some(name)) => Ok(RunConfig::new(Experiment::default_for(name)?)),
        (None, None) => Err(CliError::Usage(format!(
            "name an experiment ({}) or pass --config",
            EXPERIMENT_NAMES.join(", ")
        ))),
    }
}

fn apply_common(cfg: &mut RunConfig, common: &Common) {
    if let Some(seed) = common.seed {
        cfg.ensemble.seed = seed;
    }
    if let Some(reps) = common.reps {
        cfg.ensemble.reps = reps;
    }
    if let Some(out) = &common.out {
        cfg.out = Some(out.clone());
    }
}

fn set_threads(n: Option<usize>) -> Result<()> {
    if let Some(n) = n {
        if n == 0 {
            return Err(CliError::Usage("--parallel needs at least one thread".into()));
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn execute(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let out = cfg.out.clone().unwrap_or_else(|| default_out(&out_root(), &cfg.experiment));
    let summary = run(cfg, &out)?;
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serialises"));
    println!("results written to {}", out.display());
    Ok(())
}

/// Resolves the run configuration of a `run` invocation.
pub fn resolve_run(
    experiment: Option<&str>,
    common: &Common,
    scenario: Option<&str>,
    variant: Option<&str>,
    bound: Option<f64>,
) -> Result<RunConfig> {
    let mut cfg = base_config(common, experiment)?;
    apply_common(&mut cfg, common);
    match &mut cfg.experiment {
        Experiment::Ablation { scenario: s, .. } => {
            if let Some(name) = scenario {
                *s = name.to_string();
            }
        }
        Experiment::PulmonaryDiscrepancy { variant: v, .. } => {
            if let Some(name) = variant {
                *v = match name {
                    "linear" => PulmonaryVariant::Linear,
                    "algebraic" => PulmonaryVariant::Algebraic,
                    _ => PulmonaryVariant::Inductive,
                };
            }
        }
        Experiment::Harmonic { model, .. }
        | Experiment::HarmonicDiscrepancy { model, .. }
        | Experiment::LambdaSweep { model, .. } => {
            if let Some(b) = bound {
                model.init = InitDistribution::UniformSymmetric { bound: b };
            }
        }
        _ => {}
    }
    let unused = |flag: &str, given: bool| -> Result<()> {
        if given {
            Err(CliError::Usage(format!("{flag} does not apply to a {} run", cfg.experiment.label())))
        } else {
            Ok(())
        }
    };
    let e = &cfg.experiment;
    unused("--scenario", scenario.is_some() && !matches!(e, Experiment::Ablation { .. }))?;
    unused("--variant", variant.is_some() && !matches!(e, Experiment::PulmonaryDiscrepancy { .. }))?;
    unused(
        "--B",
        bound.is_some()
            && !matches!(e, Experiment::Harmonic { .. } | Experiment::HarmonicDiscrepancy { .. } | Experiment::LambdaSweep { .. }),
    )?;
    Ok(cfg)
}

pub fn main_with(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { common, cycles, nonlinear } => {
            set_threads(common.parallel)?;
            let mut cfg = base_config(&common, Some("simulate-cvsim"))?;
            apply_common(&mut cfg, &common);
            if let Experiment::SimulateCvsim { cycles: c, pulmonary, .. } = &mut cfg.experiment {
                if let Some(n) = cycles {
                    *c = n;
                }
                if nonlinear {
                    *pulmonary = PulmResistance::default_nonlinear();
                }
            }
            execute(&cfg)
        }
        Command::Run { experiment, common, scenario, variant, bound, print_config } => {
            let cfg =
                resolve_run(experiment.as_deref(), &common, scenario.as_deref(), variant.as_deref(), bound)?;
            if print_config {
                print!("{}", cfg.to_toml()?);
                return Ok(());
            }
            set_threads(common.parallel)?;
            execute(&cfg)
        }
        Command::Report { dir } => {
            let dir = dir.unwrap_or_else(out_root);
            report_dir(&dir)
        }
    }
}

fn report_dir(dir: &Path) -> Result<()> {
    if !dir.exists() {
        println!("no results: {} does not exist", dir.display());
        return Ok(());
    }
    let runs = report::load(dir)?;
    match report::render(&runs) {
        Some(text) => print!("{text}"),
        None => println!("no results in {}", dir.display()),
    }
    Ok(())
}
