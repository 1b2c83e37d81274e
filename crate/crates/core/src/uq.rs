//! Monte-Carlo ensembles and their summaries.
//!
//! A replicate is any computation driven by a pair of stream indices, one for
//! the data noise and one for the random basis. Replicates run on the rayon
//! pool and are reduced in replicate order, so aggregates do not depend on
//! scheduling.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use std::collections::BTreeSet;

use crate::cvsim6::{
    simulate_periodic, Compartment, CvSimParams, PressureState, PulmResistance, StateTrace, DEFAULT_WARMUP_CYCLES,
    FLOW_NAMES,
};
use crate::ode::Tolerance;
use crate::error::{config_err, Error, Result};
use crate::synth::{corrupt, NoiseModel, ScenarioSpec};
use crate::xtfc::{estimate, DiscrepancySpec, EstimationProblem, EstimationResult, GridSpec, XtfcConfig};

/// Largest fraction of failed replicates an ensemble tolerates.
pub const MAX_FAILURE_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleSpec {
    pub reps: usize,
    pub seed: u64,
    pub resample_noise: bool,
    pub resample_basis: bool,
}

impl Default for EnsembleSpec {
    fn default() -> Self {
        Self { reps: 100, seed: 2024, resample_noise: true, resample_basis: true }
    }
}

impl EnsembleSpec {
    pub fn validate(&self) -> Result<()> {
        if self.reps < 2 {
            return Err(config_err(format!("an ensemble needs at least 2 replicates for a spread, got {}", self.reps)));
        }
        if self.reps > u32::MAX as usize {
            return Err(config_err("too many replicates"));
        }
        Ok(())
    }

    /// Stream indices of replicate `i`.
    pub fn streams(&self, i: usize) -> ReplicateStreams {
        let i = i as u32;
        ReplicateStreams {
            index: i as usize,
            noise: if self.resample_noise { i } else { 0 },
            basis: if self.resample_basis { i } else { 0 },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReplicateStreams {
    pub index: usize,
    pub noise: u32,
    pub basis: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateFailure {
    pub index: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble<T> {
    /// Successful replicates in index order.
    pub members: Vec<T>,
    pub failures: Vec<ReplicateFailure>,
}

/// Runs `f` for every replicate. Failures are collected and excluded; more than
/// [`MAX_FAILURE_FRACTION`] of them is an error.
pub fn run_ensemble<T, F>(spec: &EnsembleSpec, f: F) -> Result<Ensemble<T>>
where
    T: Send,
    F: Fn(ReplicateStreams) -> Result<T> + Sync,
{
    spec.validate()?;
    let outcomes: Vec<Result<T>> = (0..spec.reps).into_par_iter().map(|i| f(spec.streams(i))).collect();
    let mut members = Vec::with_capacity(spec.reps);
    let mut failures = Vec::new();
    for (index, out) in outcomes.into_iter().enumerate() {
        match out {
            Ok(v) => members.push(v),
            Err(e) => failures.push(ReplicateFailure { index, reason: e.to_string() }),
        }
    }
    if failures.len() as f64 > MAX_FAILURE_FRACTION * spec.reps as f64 {
        return Err(Error::EnsembleFailure { failed: failures.len(), total: spec.reps });
    }
    Ok(Ensemble { members, failures })
}

/// Named time series on a shared grid; `values[s][t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalSet {
    pub names: Vec<String>,
    pub units: Vec<String>,
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

impl SignalSet {
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.index_of(name).map(|i| self.values[i].as_slice())
    }

    fn compatible(&self, other: &SignalSet) -> bool {
        self.names == other.names && self.times.len() == other.times.len()
    }

    /// Pressures, flows, volumes and the optional discrepancy of an estimate,
    /// keeping every `stride`-th output point.
    pub fn from_estimate(result: &EstimationResult, stride: usize) -> Self {
        let stride = stride.max(1);
        let idx: Vec<usize> = (0..result.trace.len()).step_by(stride).collect();
        let mut names = Vec::new();
        let mut units = Vec::new();
        let mut values = Vec::new();
        for c in Compartment::ALL {
            names.push(c.pressure_name().to_string());
            units.push("mmHg".to_string());
            values.push(idx.iter().map(|&i| result.trace.states[i][c.index()]).collect());
        }
        for (k, n) in FLOW_NAMES.iter().enumerate() {
            names.push(n.to_string());
            units.push("mL/s".to_string());
            values.push(idx.iter().map(|&i| result.flows[i].as_array()[k]).collect());
        }
        for c in Compartment::ALL {
            names.push(c.volume_name().to_string());
            units.push("mL".to_string());
            values.push(idx.iter().map(|&i| result.volumes[i].0[c.index()]).collect());
        }
        if let Some(d) = &result.delta {
            names.push("delta".to_string());
            units.push("mL/s".to_string());
            values.push(idx.iter().map(|&i| d[i]).collect());
        }
        let times = idx.iter().map(|&i| result.trace.times[i]).collect();
        Self { names, units, times, values }
    }
}

/// Pointwise ensemble statistics, `[signal][time]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UncertaintyBands {
    pub names: Vec<String>,
    pub units: Vec<String>,
    pub times: Vec<f64>,
    pub members: usize,
    pub mean: Vec<Vec<f64>>,
    pub epistemic: Vec<Vec<f64>>,
    /// Constant per signal.
    pub aleatoric: Vec<f64>,
    pub total: Vec<Vec<f64>>,
    pub q05: Vec<Vec<f64>>,
    pub q95: Vec<Vec<f64>>,
}

/// Sample mean and (n-1) standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Linear-interpolation quantile of unsorted data.
pub fn quantile(xs: &[f64], q: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// `sqrt(e^2 + a^2)`.
pub fn combine(epistemic: f64, aleatoric: f64) -> f64 {
    (epistemic * epistemic + aleatoric * aleatoric).sqrt()
}

/// Splits the spread of an ensemble into epistemic and aleatoric parts.
///
/// `aleatoric[s]` is the noise level of signal `s`; signals named in
/// `assume_exact` get zero aleatoric spread.
pub fn decompose(members: &[SignalSet], aleatoric: &[f64], assume_exact: &[&str]) -> Result<UncertaintyBands> {
    let Some(first) = members.first() else {
        return Err(Error::Input("empty ensemble".into()));
    };
    if members.len() < 2 {
        return Err(Error::Input("decomposition needs at least 2 replicates".into()));
    }
    if members.iter().any(|m| !first.compatible(m)) {
        return Err(Error::Input("replicates have different signals or grids".into()));
    }
    if aleatoric.len() != first.names.len() {
        return Err(Error::Input(format!(
            "{} aleatoric levels for {} signals",
            aleatoric.len(),
            first.names.len()
        )));
    }
    let ns = first.names.len();
    let nt = first.times.len();
    let alea: Vec<f64> = (0..ns)
        .map(|s| if assume_exact.contains(&first.names[s].as_str()) { 0.0 } else { aleatoric[s] })
        .collect();
    let mut bands = UncertaintyBands {
        names: first.names.clone(),
        units: first.units.clone(),
        times: first.times.clone(),
        members: members.len(),
        mean: vec![vec![0.0; nt]; ns],
        epistemic: vec![vec![0.0; nt]; ns],
        aleatoric: alea.clone(),
        total: vec![vec![0.0; nt]; ns],
        q05: vec![vec![0.0; nt]; ns],
        q95: vec![vec![0.0; nt]; ns],
    };
    let mut col = vec![0.0; members.len()];
    for (s, &a) in alea.iter().enumerate() {
        for t in 0..nt {
            for (c, m) in col.iter_mut().zip(members) {
                *c = m.values[s][t];
            }
            let (mean, sd) = mean_std(&col);
            bands.mean[s][t] = mean;
            bands.epistemic[s][t] = sd;
            bands.total[s][t] = combine(sd, a);
            bands.q05[s][t] = quantile(&col, 0.05);
            bands.q95[s][t] = quantile(&col, 0.95);
        }
    }
    Ok(bands)
}

impl UncertaintyBands {
    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Grid indices with `t_start <= t <= t_end`.
    pub fn window(&self, t_start: f64, t_end: f64) -> Vec<usize> {
        let eps = 1e-9;
        (0..self.times.len()).filter(|&i| self.times[i] >= t_start - eps && self.times[i] <= t_end + eps).collect()
    }

    /// Time average of the 5-95% width of signal `s` over `idx`.
    pub fn mean_band_width(&self, s: usize, idx: &[usize]) -> f64 {
        idx.iter().map(|&i| self.q95[s][i] - self.q05[s][i]).sum::<f64>() / idx.len() as f64
    }

    /// `t,<name>_mean,<name>_epistemic,...` with units in brackets. Both the
    /// quantile band and the `mean +- 2 total` band are written.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let mut header = String::from("t[s]");
        for (n, u) in self.names.iter().zip(&self.units) {
            for part in ["mean", "epistemic", "aleatoric", "total", "q05", "q95", "lo2sd", "hi2sd"] {
                header.push_str(&format!(",{n}_{part}[{u}]"));
            }
        }
        writeln!(w, "{header}")?;
        for t in 0..self.times.len() {
            let mut line = format!("{}", self.times[t]);
            for s in 0..self.names.len() {
                let (m, tot) = (self.mean[s][t], self.total[s][t]);
                for v in [
                    m,
                    self.epistemic[s][t],
                    self.aleatoric[s],
                    tot,
                    self.q05[s][t],
                    self.q95[s][t],
                    m - 2.0 * tot,
                    m + 2.0 * tot,
                ] {
                    line.push_str(&format!(",{v}"));
                }
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovEntry {
    pub name: String,
    pub cov: f64,
    /// The ensemble mean changed sign in the window (or was exactly zero with a
    /// nonzero spread), so the denominator is the window average of `|mean|`.
    pub flagged: bool,
}

/// Time-averaged coefficient of variation (epistemic std over `|mean|`) of
/// every signal over `[t_start, t_end]`.
pub fn cov_summary(bands: &UncertaintyBands, t_start: f64, t_end: f64) -> Result<Vec<CovEntry>> {
    let idx = bands.window(t_start, t_end);
    if idx.is_empty() {
        return Err(Error::Input(format!("window [{t_start}, {t_end}] contains no grid points")));
    }
    let n = idx.len() as f64;
    Ok((0..bands.names.len())
        .map(|s| {
            let mean = &bands.mean[s];
            let epi = &bands.epistemic[s];
            // a sign change, or spread around an exactly zero mean, makes the pointwise ratio meaningless
            let crosses = idx.iter().any(|&i| mean[i] > 0.0) && idx.iter().any(|&i| mean[i] < 0.0);
            let degenerate = idx.iter().any(|&i| mean[i] == 0.0 && epi[i] > 0.0);
            let fallback = crosses || degenerate;
            let cov = if fallback {
                let num = idx.iter().map(|&i| epi[i]).sum::<f64>() / n;
                let den = idx.iter().map(|&i| mean[i].abs()).sum::<f64>() / n;
                if den == 0.0 {
                    0.0
                } else {
                    num / den
                }
            } else {
                // 0/0 (a closed valve in every replicate) is undefined and left out of the average
                let ratios: Vec<f64> = idx.iter().filter(|&&i| mean[i] != 0.0).map(|&i| epi[i] / mean[i].abs()).collect();
                if ratios.is_empty() {
                    0.0
                } else {
                    ratios.iter().sum::<f64>() / ratios.len() as f64
                }
            };
            CovEntry { name: bands.names[s].clone(), cov, flagged: fallback }
        })
        .collect())
}

pub fn write_cov_csv<W: Write>(entries: &[CovEntry], mut w: W) -> Result<()> {
    writeln!(w, "variable,cov,flagged")?;
    for e in entries {
        writeln!(w, "{},{},{}", e.name, e.cov, e.flagged)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSnapshot {
    pub t: f64,
    pub names: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
    /// Signals with zero spread at `t`; their off-diagonal entries are 0.
    pub zero_variance: Vec<usize>,
}

/// Pearson correlation across replicates of `signals` at the grid point nearest `t`.
pub fn correlation_snapshot(members: &[SignalSet], signals: &[usize], t: f64) -> Result<CorrelationSnapshot> {
    if members.len() < 3 {
        return Err(Error::Input("correlation needs at least 3 replicates".into()));
    }
    let first = &members[0];
    if members.iter().any(|m| !first.compatible(m)) {
        return Err(Error::Input("replicates have different signals or grids".into()));
    }
    if signals.iter().any(|&s| s >= first.names.len()) {
        return Err(Error::Input("signal index out of range".into()));
    }
    let ti = first
        .times
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs()))
        .map(|(i, _)| i)
        .ok_or_else(|| Error::Input("empty grid".into()))?;
    let cols: Vec<Vec<f64>> = signals.iter().map(|&s| members.iter().map(|m| m.values[s][ti]).collect()).collect();
    let stats: Vec<(f64, f64)> = cols.iter().map(|c| mean_std(c)).collect();
    let k = signals.len();
    let mut matrix = vec![vec![0.0; k]; k];
    let zero_variance: Vec<usize> = (0..k).filter(|&i| stats[i].1 == 0.0).collect();
    let n = members.len() as f64;
    for i in 0..k {
        matrix[i][i] = 1.0;
        for j in 0..i {
            let rho = if stats[i].1 == 0.0 || stats[j].1 == 0.0 {
                0.0
            } else {
                let cov = cols[i]
                    .iter()
                    .zip(&cols[j])
                    .map(|(a, b)| (a - stats[i].0) * (b - stats[j].0))
                    .sum::<f64>()
                    / (n - 1.0);
                (cov / (stats[i].1 * stats[j].1)).clamp(-1.0, 1.0)
            };
            matrix[i][j] = rho;
            matrix[j][i] = rho;
        }
    }
    Ok(CorrelationSnapshot {
        t: first.times[ti],
        names: signals.iter().map(|&s| first.names[s].clone()).collect(),
        matrix,
        zero_variance: zero_variance.iter().map(|&i| signals[i]).collect(),
    })
}

impl CorrelationSnapshot {
    /// Header `t=<time>,<names...>`, then one row per signal.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t={},{}", self.t, self.names.join(","))?;
        for (n, row) in self.names.iter().zip(&self.matrix) {
            let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{n},{}", vals.join(","))?;
        }
        Ok(())
    }
}

/// Inputs of a six-compartment estimation ensemble.
#[derive(Debug, Clone)]
pub struct CvEnsembleInput<'a> {
    /// Parameters of the estimator's model (unknown ones give the nominal value).
    pub params: &'a CvSimParams,
    /// Ground-truth trace sampled on a grid whose step divides the observation period.
    pub truth: &'a StateTrace,
    pub scenario: &'a ScenarioSpec,
    pub noise: &'a NoiseModel,
    pub config: &'a XtfcConfig,
    /// Keep every `output_stride`-th reconstructed point.
    pub output_stride: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvReplicate {
    pub signals: SignalSet,
    pub theta_hat: Vec<f64>,
    pub theta_points: Vec<Vec<f64>>,
    pub iterations: usize,
}

/// Corrupts the truth and runs the estimator once per replicate.
pub fn run_cvsim_ensemble(input: &CvEnsembleInput<'_>, spec: &EnsembleSpec) -> Result<Ensemble<CvReplicate>> {
    input.config.validate()?;
    input.scenario.validate()?;
    run_ensemble(spec, |s| {
        let obs = corrupt(input.truth, input.scenario, input.noise, spec.seed, s.noise)?;
        let bases = input.config.build_bases(spec.seed, s.basis)?;
        let problem = EstimationProblem::from_observations(input.params, &obs, &input.scenario.unknown_params)
            .trimmed_to(input.config.grid.h);
        let result = estimate(&problem, input.config, &bases)?;
        Ok(CvReplicate {
            signals: SignalSet::from_estimate(&result, input.output_stride),
            theta_hat: result.theta_hat.clone(),
            theta_points: result.theta_points.clone(),
            iterations: result.total_iterations(),
        })
    })
}

/// Aleatoric levels matching [`SignalSet::from_estimate`]: the noise sigma for
/// observed pressures, zero for everything else.
pub fn cvsim_aleatoric(signals: &SignalSet, scenario: &ScenarioSpec, noise: &NoiseModel) -> Vec<f64> {
    signals
        .names
        .iter()
        .map(|n| match Compartment::from_pressure_name(n) {
            Some(c) if scenario.observed[c.index()] => noise.sigma(c),
            _ => 0.0,
        })
        .collect()
}

impl Ensemble<CvReplicate> {
    pub fn signal_sets(&self) -> Vec<SignalSet> {
        self.members.iter().map(|m| m.signals.clone()).collect()
    }

    /// Mean and std of each unknown parameter's final estimate.
    pub fn theta_stats(&self) -> Vec<(f64, f64)> {
        let np = self.members.first().map(|m| m.theta_hat.len()).unwrap_or(0);
        (0..np)
            .map(|j| mean_std(&self.members.iter().map(|m| m.theta_hat[j]).collect::<Vec<_>>()))
            .collect()
    }
}

/// Recording length of the ablation studies, in cardiac cycles.
pub const ABLATION_CYCLES: usize = 10;
/// Unknown parameters start at this multiple of their nominal value.
pub const ABLATION_THETA_START: f64 = 1.25;
/// Recording length of the pulmonary discrepancy studies, in cardiac cycles.
pub const MODEL_FORM_CYCLES: usize = 5;
/// Sampling rate of the discrepancy studies: one sample per collocation
/// spacing of a 10 ms subdomain.
pub const MODEL_FORM_SAMPLE_RATE: f64 = 1000.0;
/// The CoV is averaged over this many final cycles.
pub const COV_WINDOW_CYCLES: f64 = 2.0;
/// Sampling step of ground-truth traces, s.
pub const TRUTH_SAMPLE_DT: f64 = 0.001;

/// Periodic ground truth from the default initial state after the default warm-up.
pub fn reference_trace(params: &CvSimParams, pulm: &PulmResistance, cycles: usize) -> Result<StateTrace> {
    simulate_periodic(
        params,
        pulm,
        &PressureState::default_initial(),
        DEFAULT_WARMUP_CYCLES,
        cycles,
        TRUTH_SAMPLE_DT,
        Tolerance::default(),
    )
}

/// Estimator settings of the ablation studies.
pub fn ablation_config() -> XtfcConfig {
    XtfcConfig { theta_init_factor: ABLATION_THETA_START, ..XtfcConfig::default() }
}

/// Estimator settings of the pulmonary discrepancy studies.
pub fn model_form_config(discrepancy: DiscrepancySpec) -> XtfcConfig {
    XtfcConfig { grid: GridSpec { h: 0.01, points: 10, neurons: 10 }, discrepancy, ..XtfcConfig::default() }
}

/// `P_a` and `P_pa` observed at [`MODEL_FORM_SAMPLE_RATE`], no unknown parameters.
pub fn model_form_scenario() -> ScenarioSpec {
    ScenarioSpec {
        name: "model-form".into(),
        observed: [false, true, false, false, true, false],
        unknown_params: BTreeSet::new(),
        sample_rate: MODEL_FORM_SAMPLE_RATE,
        ..ScenarioSpec::builtin(5).expect("builtin scenario")
    }
}

/// An ensemble with its bands, CoV table and parameter statistics.
#[derive(Debug, Clone)]
pub struct CvStudy {
    pub ensemble: Ensemble<CvReplicate>,
    pub bands: UncertaintyBands,
    pub cov: Vec<CovEntry>,
    /// `(mean, std)` per unknown parameter.
    pub theta: Vec<(f64, f64)>,
}

/// Runs [`run_cvsim_ensemble`] and summarises it; the CoV covers the last
/// `cov_cycles` cycles of the reconstruction.
pub fn run_cvsim_study(input: &CvEnsembleInput<'_>, spec: &EnsembleSpec, cov_cycles: f64) -> Result<CvStudy> {
    let ensemble = run_cvsim_ensemble(input, spec)?;
    let sets = ensemble.signal_sets();
    let first = sets.first().ok_or_else(|| Error::Input("ensemble has no successful replicates".into()))?;
    let aleatoric = cvsim_aleatoric(first, input.scenario, input.noise);
    let bands = decompose(&sets, &aleatoric, &[])?;
    let t_end = *bands.times.last().expect("non-empty grid");
    let cov = cov_summary(&bands, t_end - cov_cycles * input.params.period(), t_end)?;
    let theta = ensemble.theta_stats();
    Ok(CvStudy { ensemble, bands, cov, theta })
}

impl CvStudy {
    pub fn cov_of(&self, name: &str) -> Option<f64> {
        self.cov.iter().find(|c| c.name == name).map(|c| c.cov)
    }
}
