//! Synthetic observations: noise model, observation masks and the ablation scenarios.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::cvsim6::{Compartment, StateTrace};
use crate::error::{config_err, Error, Result};
use crate::rng::{Purpose, RngStreams};

/// How per-variable noise levels are set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseRule {
    /// `sigma_i = fraction * max_t |x_i(t)|`.
    FractionOfMax { fraction: f64 },
    Explicit { values: [f64; 6] },
}

impl Default for NoiseRule {
    fn default() -> Self {
        NoiseRule::FractionOfMax { fraction: 0.02 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub sigmas: [f64; 6],
    pub rule: NoiseRule,
}

impl NoiseModel {
    pub fn zero() -> Self {
        Self { sigmas: [0.0; 6], rule: NoiseRule::Explicit { values: [0.0; 6] } }
    }

    pub fn sigma(&self, c: Compartment) -> f64 {
        self.sigmas[c.index()]
    }
}

pub fn derive_sigmas(trace: &StateTrace, rule: NoiseRule) -> Result<NoiseModel> {
    if trace.is_empty() {
        return Err(Error::Input("cannot derive noise levels from an empty trace".into()));
    }
    let sigmas = match rule {
        NoiseRule::FractionOfMax { fraction } => {
            if !(fraction >= 0.0 && fraction.is_finite()) {
                return Err(config_err(format!("noise fraction must be non-negative, got {fraction}")));
            }
            std::array::from_fn(|i| fraction * trace.states.iter().map(|s| s[i].abs()).fold(0.0, f64::max))
        }
        NoiseRule::Explicit { values } => {
            if values.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
                return Err(config_err("explicit noise levels must be finite and non-negative"));
            }
            values
        }
    };
    Ok(NoiseModel { sigmas, rule })
}

/// Model parameters that can be estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnknownParam {
    RPv,
    CA,
}

impl UnknownParam {
    pub fn name(self) -> &'static str {
        match self {
            UnknownParam::RPv => "r_pv",
            UnknownParam::CA => "c_a",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: String,
    /// Observation mask in [`Compartment::ALL`] order.
    pub observed: [bool; 6],
    pub unknown_params: BTreeSet<UnknownParam>,
    /// Observation rate, Hz.
    pub sample_rate: f64,
    pub noise: NoiseRule,
    pub perturb_initial_conditions: bool,
    /// Also perturb the starting value of unobserved states.
    #[serde(default)]
    pub perturb_unobserved: bool,
}

pub const DEFAULT_SAMPLE_RATE: f64 = 200.0;

impl ScenarioSpec {
    /// Scenarios 1 to 6 of the ablation study.
    pub fn builtin(index: usize) -> Result<Self> {
        let observed = match index {
            1 => [true; 6],
            2 => [true, true, true, true, true, false],
            3 => [false, true, true, true, true, false],
            4 => [false, true, true, false, true, false],
            5 | 6 => [false, true, false, false, true, false],
            _ => return Err(config_err(format!("no built-in scenario Sc{index}"))),
        };
        let mut unknown_params = BTreeSet::from([UnknownParam::RPv]);
        if index == 6 {
            unknown_params.insert(UnknownParam::CA);
        }
        Ok(Self {
            name: format!("Sc{index}"),
            observed,
            unknown_params,
            sample_rate: DEFAULT_SAMPLE_RATE,
            noise: NoiseRule::default(),
            perturb_initial_conditions: true,
            perturb_unobserved: false,
        })
    }

    /// Parses `Sc1`..`Sc6` (case-insensitive).
    pub fn from_name(name: &str) -> Result<Self> {
        let lower = name.to_ascii_lowercase();
        let idx = lower
            .strip_prefix("sc")
            .and_then(|d| d.parse::<usize>().ok())
            .ok_or_else(|| config_err(format!("unknown scenario {name:?}")))?;
        Self::builtin(idx)
    }

    pub fn observed_compartments(&self) -> Vec<Compartment> {
        Compartment::ALL.into_iter().filter(|c| self.observed[c.index()]).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate > 0.0 && self.sample_rate.is_finite()) {
            return Err(config_err("sample_rate must be positive"));
        }
        Ok(())
    }
}

/// Noisy samples of one pressure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservedSeries {
    pub variable: Compartment,
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationSet {
    pub series: Vec<ObservedSeries>,
    pub noise: NoiseModel,
    pub seed: u64,
    /// State at the first sample time. Observed entries are perturbed when the
    /// scenario asks for it and equal the first observation; the rest are exact.
    pub initial_state: [f64; 6],
    pub t0: f64,
    pub t_end: f64,
}

impl ObservationSet {
    pub fn get(&self, c: Compartment) -> Option<&ObservedSeries> {
        self.series.iter().find(|s| s.variable == c)
    }

    pub fn observed(&self) -> Vec<Compartment> {
        self.series.iter().map(|s| s.variable).collect()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "variable,t,value")?;
        for s in &self.series {
            for (t, v) in s.times.iter().zip(&s.values) {
                writeln!(w, "{},{t},{v}", s.variable.pressure_name())?;
            }
        }
        Ok(())
    }

    /// Reads `variable,t,value` rows. Noise levels and the initial state are
    /// not stored in the CSV; the initial state is taken from the first
    /// observation of each variable (zero otherwise).
    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut series: Vec<ObservedSeries> = Vec::new();
        for (lineno, line) in r.lines().enumerate() {
            let line = line?;
            if lineno == 0 {
                if line.trim() != "variable,t,value" {
                    return Err(Error::Input(format!("unexpected observation header {line:?}")));
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::Input(format!("malformed observation row {} : {line:?}", lineno + 1));
            let mut it = line.split(',');
            let (Some(name), Some(t), Some(v), None) = (it.next(), it.next(), it.next(), it.next()) else {
                return Err(bad());
            };
            let c = Compartment::from_pressure_name(name.trim()).ok_or_else(bad)?;
            let t: f64 = t.trim().parse().map_err(|_| bad())?;
            let v: f64 = v.trim().parse().map_err(|_| bad())?;
            match series.iter_mut().find(|s| s.variable == c) {
                Some(s) => {
                    if t <= *s.times.last().expect("non-empty") {
                        return Err(Error::Input(format!("times for {c} must increase strictly (row {})", lineno + 1)));
                    }
                    s.times.push(t);
                    s.values.push(v);
                }
                None => series.push(ObservedSeries { variable: c, times: vec![t], values: vec![v] }),
            }
        }
        let mut initial_state = [0.0; 6];
        let (mut t0, mut t_end) = (f64::INFINITY, f64::NEG_INFINITY);
        for s in &series {
            initial_state[s.variable.index()] = s.values[0];
            t0 = t0.min(s.times[0]);
            t_end = t_end.max(*s.times.last().expect("non-empty"));
        }
        if series.is_empty() {
            t0 = 0.0;
            t_end = 0.0;
        }
        Ok(Self { series, noise: NoiseModel::zero(), seed: 0, initial_state, t0, t_end })
    }
}

/// Samples the trace at the scenario rate and adds i.i.d. Gaussian noise.
///
/// The trace must be uniformly sampled and its step must divide the
/// observation period. Noise comes from stream `(Noise, replicate)` of `seed`.
pub fn corrupt(
    trace: &StateTrace,
    scenario: &ScenarioSpec,
    noise: &NoiseModel,
    seed: u64,
    replicate: u32,
) -> Result<ObservationSet> {
    scenario.validate()?;
    if trace.len() < 2 {
        return Err(Error::Input("trace needs at least two samples".into()));
    }
    if noise.sigmas.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(Error::Input("noise levels must be finite and non-negative".into()));
    }
    let dt = trace.times[1] - trace.times[0];
    let stride_f = 1.0 / (scenario.sample_rate * dt);
    let stride = stride_f.round() as usize;
    if stride == 0 || (stride_f - stride as f64).abs() > 1e-6 * stride_f {
        return Err(Error::Input(format!(
            "trace step {dt} s does not divide the observation period {} s",
            1.0 / scenario.sample_rate
        )));
    }
    let mut rng = RngStreams::new(seed).rng(Purpose::Noise, replicate);
    let truth0 = trace.states[0];
    // six initial-condition draws come first so the noise stream does not depend
    // on the mask; unobserved states start at the truth unless asked otherwise
    let mut initial_state = truth0;
    if scenario.perturb_initial_conditions {
        for (i, x) in initial_state.iter_mut().enumerate() {
            let e = gaussian(&mut rng, noise.sigmas[i]);
            if scenario.observed[i] || scenario.perturb_unobserved {
                *x += e;
            }
        }
    }
    let mut series = Vec::new();
    for c in scenario.observed_compartments() {
        let sigma = noise.sigma(c);
        let (mut times, mut values) = (Vec::new(), Vec::new());
        for (k, idx) in (0..trace.len()).step_by(stride).enumerate() {
            times.push(trace.times[idx]);
            let v = if k == 0 {
                initial_state[c.index()]
            } else {
                trace.states[idx][c.index()] + gaussian(&mut rng, sigma)
            };
            values.push(v);
        }
        series.push(ObservedSeries { variable: c, times, values });
    }
    Ok(ObservationSet {
        series,
        noise: *noise,
        seed,
        initial_state,
        t0: trace.times[0],
        t_end: *trace.times.last().expect("non-empty"),
    })
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> f64 {
    if sigma == 0.0 {
        return 0.0;
    }
    Normal::new(0.0, sigma).expect("sigma checked non-negative").sample(rng)
}
