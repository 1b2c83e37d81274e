//! Run configuration: one TOML file per run.
//!
//! ```toml
//! [experiment]
//! kind = "ablation"
//! scenario = "Sc5"
//! cycles = 10
//!
//! [experiment.estimator.grid]
//! h = 0.001
//! points = 5
//! neurons = 5
//!
//! [ensemble]
//! reps = 100
//! seed = 2024
//!
//! [params]       # any subset of the model parameters
//! r_pv = 0.08
//! ```

use std::path::{Path, PathBuf};

use mcxtfc::basis::{Activation, InitDistribution};
use mcxtfc::cvsim6::{CvSimParams, PulmResistance};
use mcxtfc::harmonic::{DiscrepancySetup, HarmonicConfig, HarmonicDataSpec, TruthModel};
use mcxtfc::synth::ScenarioSpec;
use mcxtfc::uq::{
    ablation_config, model_form_config, EnsembleSpec, ABLATION_CYCLES, MODEL_FORM_CYCLES, TRUTH_SAMPLE_DT,
};
use mcxtfc::xtfc::{DiscrepancySpec, XtfcConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub experiment: Experiment,
    #[serde(default)]
    pub ensemble: EnsembleSpec,
    /// Output directory; defaults to a subdirectory of the output root.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Model parameters (unspecified entries keep their defaults).
    #[serde(default)]
    pub params: CvSimParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PulmonaryVariant {
    /// No discrepancy term: the linear model alone.
    Linear,
    Algebraic,
    Inductive,
}

impl PulmonaryVariant {
    pub fn discrepancy(self, neurons: usize) -> DiscrepancySpec {
        match self {
            PulmonaryVariant::Linear => DiscrepancySpec::None,
            PulmonaryVariant::Algebraic => DiscrepancySpec::Algebraic { neurons },
            PulmonaryVariant::Inductive => DiscrepancySpec::inductive_default(neurons),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PulmonaryVariant::Linear => "linear",
            PulmonaryVariant::Algebraic => "algebraic",
            PulmonaryVariant::Inductive => "inductive",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Experiment {
    /// Forward simulation to a periodic steady state.
    SimulateCvsim {
        #[serde(default = "defaults::simulate_cycles")]
        cycles: usize,
        #[serde(default = "defaults::sample_dt")]
        sample_dt: f64,
        #[serde(default)]
        pulmonary: PulmResistance,
    },
    Harmonic {
        #[serde(default)]
        data: HarmonicDataSpec,
        #[serde(default)]
        model: HarmonicConfig,
    },
    HarmonicDiscrepancy {
        #[serde(default = "defaults::discrepancy_data")]
        data: HarmonicDataSpec,
        #[serde(default = "defaults::discrepancy_model")]
        model: HarmonicConfig,
        #[serde(default)]
        setup: DiscrepancySetup,
    },
    LambdaSweep {
        #[serde(default = "defaults::gap_data")]
        data: HarmonicDataSpec,
        #[serde(default)]
        model: HarmonicConfig,
        #[serde(default = "defaults::lambdas")]
        lambdas: Vec<f64>,
    },
    Ablation {
        #[serde(default = "defaults::scenario")]
        scenario: String,
        #[serde(default = "defaults::ablation_cycles")]
        cycles: usize,
        #[serde(default = "ablation_config")]
        estimator: XtfcConfig,
    },
    PulmonaryDiscrepancy {
        #[serde(default = "defaults::variant")]
        variant: PulmonaryVariant,
        #[serde(default = "defaults::discrepancy_neurons")]
        neurons: usize,
        #[serde(default = "defaults::model_form_cycles")]
        cycles: usize,
        /// Grid and solver settings; the discrepancy term follows `variant`.
        #[serde(default = "defaults::model_form_estimator")]
        estimator: XtfcConfig,
    },
    AppendixCAblation {
        #[serde(default)]
        data: HarmonicDataSpec,
        #[serde(default)]
        model: HarmonicConfig,
        #[serde(default = "defaults::inits")]
        inits: Vec<InitDistribution>,
        #[serde(default = "defaults::activations")]
        activations: Vec<Activation>,
        /// Extra ensemble sizes run with the default basis.
        #[serde(default = "defaults::ensemble_sizes")]
        ensemble_sizes: Vec<usize>,
    },
}

/// Values of fields left out of a config file.
mod defaults {
    use super::*;

    pub fn simulate_cycles() -> usize {
        3
    }
    pub fn sample_dt() -> f64 {
        TRUTH_SAMPLE_DT
    }
    pub fn discrepancy_data() -> HarmonicDataSpec {
        HarmonicDataSpec {
            model: TruthModel::Nonlinear,
            span: [0.0, 10.0],
            n_obs: 100,
            noise_frac: 0.02,
            ..HarmonicDataSpec::default()
        }
    }
    pub fn discrepancy_model() -> HarmonicConfig {
        HarmonicConfig { collocation: 501, ..HarmonicConfig::default() }
    }
    pub fn gap_data() -> HarmonicDataSpec {
        HarmonicDataSpec { span: [0.0, 10.0], gap: Some([3.0, 7.0]), ..HarmonicDataSpec::default() }
    }
    pub fn lambdas() -> Vec<f64> {
        vec![0.0, 0.01, 1.0, 100.0, 1e4]
    }
    pub fn scenario() -> String {
        "Sc5".into()
    }
    pub fn ablation_cycles() -> usize {
        ABLATION_CYCLES
    }
    pub fn variant() -> PulmonaryVariant {
        PulmonaryVariant::Algebraic
    }
    pub fn discrepancy_neurons() -> usize {
        10
    }
    pub fn model_form_cycles() -> usize {
        MODEL_FORM_CYCLES
    }
    pub fn model_form_estimator() -> XtfcConfig {
        model_form_config(DiscrepancySpec::None)
    }
    pub fn inits() -> Vec<InitDistribution> {
        vec![
            InitDistribution::UniformSymmetric { bound: 1.0 },
            InitDistribution::UniformRange { lo: -1.0, hi: 0.0 },
            InitDistribution::Normal { mean: 0.0, std: 1.0 },
            InitDistribution::Normal { mean: 0.0, std: 10.0 },
            InitDistribution::Exponential { mean: 2.0 },
        ]
    }
    pub fn activations() -> Vec<Activation> {
        Activation::ALL.to_vec()
    }
    pub fn ensemble_sizes() -> Vec<usize> {
        vec![10, 50]
    }
}

/// Command-line names of the experiments.
pub const EXPERIMENT_NAMES: [&str; 7] = [
    "simulate-cvsim",
    "harmonic",
    "harmonic-discrepancy",
    "lambda-sweep",
    "ablation",
    "pulmonary-discrepancy",
    "appendix-c",
];

impl Experiment {
    pub fn default_for(name: &str) -> Result<Self> {
        let kind = match name {
            "simulate-cvsim" | "simulate" => "simulate_cvsim",
            "harmonic" => "harmonic",
            "harmonic-discrepancy" => "harmonic_discrepancy",
            "lambda-sweep" => "lambda_sweep",
            "ablation" => "ablation",
            "pulmonary-discrepancy" => "pulmonary_discrepancy",
            "appendix-c" => "appendix_c_ablation",
            other => {
                return Err(CliError::Usage(format!(
                    "unknown experiment {other:?}; expected one of {}",
                    EXPERIMENT_NAMES.join(", ")
                )))
            }
        };
        // every field has a serde default, so the tag alone is a complete experiment
        Ok(toml::from_str(&format!("kind = \"{kind}\"")).expect("defaults deserialise"))
    }

    /// Short label used for default output directories.
    pub fn label(&self) -> String {
        match self {
            Experiment::SimulateCvsim { .. } => "simulate-cvsim".into(),
            Experiment::Harmonic { model, .. } => format!("harmonic-{}", init_label(&model.init)),
            Experiment::HarmonicDiscrepancy { .. } => "harmonic-discrepancy".into(),
            Experiment::LambdaSweep { .. } => "lambda-sweep".into(),
            Experiment::Ablation { scenario, .. } => format!("ablation-{scenario}"),
            Experiment::PulmonaryDiscrepancy { variant, .. } => format!("pulmonary-{}", variant.name()),
            Experiment::AppendixCAblation { .. } => "appendix-c".into(),
        }
    }

    /// Whether the experiment draws a Monte-Carlo ensemble.
    pub fn uses_ensemble(&self) -> bool {
        !matches!(self, Experiment::SimulateCvsim { .. })
    }
}

/// Compact description of a basis distribution, e.g. `U(-1,1)`.
pub fn init_label(init: &InitDistribution) -> String {
    match *init {
        InitDistribution::UniformSymmetric { bound } => format!("U(-{bound},{bound})"),
        InitDistribution::UniformRange { lo, hi } => format!("U({lo},{hi})"),
        InitDistribution::Normal { mean, std } => format!("N({mean},{std})"),
        InitDistribution::Exponential { mean } => format!("Exp({mean})"),
    }
}

impl RunConfig {
    pub fn new(experiment: Experiment) -> Self {
        Self { experiment, ensemble: EnsembleSpec::default(), out: None, params: CvSimParams::default() }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid run config: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| CliError::Usage(format!("cannot serialise run config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }

    /// Checks everything that can be checked before any computation.
    pub fn validate(&self) -> Result<()> {
        if self.experiment.uses_ensemble() {
            self.ensemble.validate()?;
        }
        self.params.validate()?;
        match &self.experiment {
            Experiment::SimulateCvsim { cycles, sample_dt, pulmonary } => {
                if *cycles == 0 || sample_dt.is_nan() || *sample_dt <= 0.0 {
                    return Err(CliError::Usage("simulation needs at least one cycle and a positive sample_dt".into()));
                }
                pulmonary.validate()?;
            }
            Experiment::Harmonic { data, model } | Experiment::HarmonicDiscrepancy { data, model, .. } => {
                model.validate()?;
                data.validate(model.t_end)?;
            }
            Experiment::LambdaSweep { data, model, lambdas } => {
                model.validate()?;
                data.validate(model.t_end)?;
                if lambdas.is_empty() || lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
                    return Err(CliError::Usage("lambdas must be a non-empty list of non-negative numbers".into()));
                }
            }
            Experiment::Ablation { scenario, cycles, estimator } => {
                ScenarioSpec::from_name(scenario)?;
                estimator.validate()?;
                if *cycles == 0 {
                    return Err(CliError::Usage("ablation needs at least one cycle".into()));
                }
            }
            Experiment::PulmonaryDiscrepancy { variant, neurons, cycles, estimator } => {
                XtfcConfig { discrepancy: variant.discrepancy(*neurons), ..estimator.clone() }.validate()?;
                if *cycles == 0 {
                    return Err(CliError::Usage("model-form study needs at least one cycle".into()));
                }
            }
            Experiment::AppendixCAblation { data, model, inits, ensemble_sizes, .. } => {
                model.validate()?;
                data.validate(model.t_end)?;
                for init in inits {
                    init.validate()?;
                }
                if let Some(m) = ensemble_sizes.iter().find(|&&m| m < 2) {
                    return Err(CliError::Usage(format!("ensemble sizes must be at least 2, got {m}")));
                }
            }
        }
        Ok(())
    }
}
