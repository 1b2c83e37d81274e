//! Harmonic benchmark: `dx/dt = cos(kt)/k`, `x(0) = x0`, on `[0, t_end]`.
//!
//! A single constrained expression covers the whole interval. Three problems
//! are provided: joint recovery of `x` and `k` from sparse noisy data, a sweep
//! over the physics weight, and fitting data generated by the nonlinear model
//! `dx/dt = x cos(kt)/k` with the linear equation plus a learned additive
//! discrepancy `delta(t)` (with `k` held fixed).
//!
//! Losses are mean squares, so rows are weighted by `sqrt(lambda / rows)` and
//! the objective is `lambda_eq * mean(eq^2) + lambda_data * mean(data^2)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::basis::{Activation, InitDistribution, RandomBasis, TimeMap};
use crate::error::{config_err, Error, Result};
use crate::newton::{gauss_newton, NewtonDiagnostics, NewtonOptions};
use crate::rng::{Purpose, RngStreams};
use crate::uq::{decompose, mean_std, run_ensemble, EnsembleSpec, ReplicateFailure, SignalSet, UncertaintyBands};
use crate::xtfc::LossWeights;

/// `sin(kt)/k^2 + x0`.
pub fn oracle_linear(k: f64, x0: f64, t: f64) -> f64 {
    (k * t).sin() / (k * k) + x0
}

/// `x0 exp(sin(kt)/k^2)`.
pub fn oracle_nonlinear(k: f64, x0: f64, t: f64) -> f64 {
    x0 * ((k * t).sin() / (k * k)).exp()
}

/// Gap between the nonlinear and linear right-hand sides along the nonlinear
/// solution: `(x(t) - 1) cos(kt)/k`.
pub fn oracle_discrepancy(k: f64, x0: f64, t: f64) -> f64 {
    (oracle_nonlinear(k, x0, t) - 1.0) * (k * t).cos() / k
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TruthModel {
    #[default]
    Linear,
    Nonlinear,
}

impl TruthModel {
    pub fn eval(self, k: f64, x0: f64, t: f64) -> f64 {
        match self {
            TruthModel::Linear => oracle_linear(k, x0, t),
            TruthModel::Nonlinear => oracle_nonlinear(k, x0, t),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// Uniform random times, drawn once per run.
    #[default]
    Random,
    /// Evenly spaced times including both span ends (minus any gap).
    Uniform,
}

/// How observations are generated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarmonicDataSpec {
    pub k: f64,
    pub x0: f64,
    pub model: TruthModel,
    /// Observation window `[a, b)`.
    pub span: [f64; 2],
    /// Sub-window of `span` without data.
    pub gap: Option<[f64; 2]>,
    pub n_obs: usize,
    pub sampling: Sampling,
    /// Noise std as a fraction of `max |x|` over `[0, t_end]`.
    pub noise_frac: f64,
}

impl Default for HarmonicDataSpec {
    fn default() -> Self {
        Self {
            k: 1.0,
            x0: 10.0,
            model: TruthModel::Linear,
            span: [0.0, 5.0],
            gap: None,
            n_obs: 40,
            sampling: Sampling::Random,
            noise_frac: 0.05,
        }
    }
}

impl HarmonicDataSpec {
    pub fn validate(&self, t_end: f64) -> Result<()> {
        if !(self.k.is_finite() && self.k > 0.0) {
            return Err(config_err(format!("k must be positive, got {}", self.k)));
        }
        if !self.x0.is_finite() {
            return Err(config_err("x0 must be finite"));
        }
        let [a, b] = self.span;
        if !(a.is_finite() && b.is_finite() && 0.0 <= a && a < b && b <= t_end) {
            return Err(config_err(format!("data span [{a}, {b}) must lie inside [0, {t_end}]")));
        }
        if let Some([ga, gb]) = self.gap {
            if !(a <= ga && ga < gb && gb <= b) || (ga == a && gb == b) {
                return Err(config_err(format!("gap [{ga}, {gb}) must be a proper sub-window of [{a}, {b})")));
            }
        }
        if self.n_obs == 0 {
            return Err(config_err("at least one observation is required"));
        }
        if !(self.noise_frac.is_finite() && self.noise_frac >= 0.0) {
            return Err(config_err("noise fraction must be non-negative"));
        }
        Ok(())
    }

    fn data_length(&self) -> f64 {
        let gap = self.gap.map_or(0.0, |[ga, gb]| gb - ga);
        self.span[1] - self.span[0] - gap
    }

    /// Maps `s` in `[0, data_length)` onto the span, skipping the gap.
    fn place(&self, s: f64) -> f64 {
        let t = self.span[0] + s;
        match self.gap {
            Some([ga, gb]) if t >= ga => t + (gb - ga),
            _ => t,
        }
    }

    /// True when `t` lies where no data are drawn.
    pub fn unobserved(&self, t: f64) -> bool {
        let outside = t < self.span[0] || t >= self.span[1];
        let in_gap = self.gap.is_some_and(|[ga, gb]| t >= ga && t < gb);
        outside || in_gap
    }

    /// Noise std: `noise_frac * max |x|`, the max taken on a fine grid.
    pub fn sigma(&self, t_end: f64) -> f64 {
        let n = 10_000;
        let max = (0..=n)
            .map(|i| self.model.eval(self.k, self.x0, t_end * i as f64 / n as f64).abs())
            .fold(0.0, f64::max);
        self.noise_frac * max
    }

    /// Observation times (sorted), noiseless values and noisy values.
    ///
    /// Times come from the `SampleTimes` stream 0 of `seed`, so every
    /// replicate of a run sees the same design; noise comes from
    /// `Noise` stream `noise_stream`.
    pub fn generate(&self, t_end: f64, seed: u64, noise_stream: u32) -> Result<HarmonicData> {
        self.validate(t_end)?;
        let streams = RngStreams::new(seed);
        let len = self.data_length();
        let mut times: Vec<f64> = match self.sampling {
            Sampling::Random => {
                let mut rng = streams.rng(Purpose::SampleTimes, 0);
                (0..self.n_obs).map(|_| self.place(rng.random::<f64>() * len)).collect()
            }
            Sampling::Uniform if self.n_obs == 1 => vec![self.span[0]],
            Sampling::Uniform => {
                (0..self.n_obs).map(|i| self.place(len * i as f64 / (self.n_obs - 1) as f64)).collect()
            }
        };
        times.sort_by(f64::total_cmp);
        let truth: Vec<f64> = times.iter().map(|&t| self.model.eval(self.k, self.x0, t)).collect();
        let sigma = self.sigma(t_end);
        let values = if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).map_err(|e| config_err(e.to_string()))?;
            let mut rng = streams.rng(Purpose::Noise, noise_stream);
            truth.iter().map(|v| v + normal.sample(&mut rng)).collect()
        } else {
            truth.clone()
        };
        Ok(HarmonicData { times, truth, values, sigma })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarmonicData {
    pub times: Vec<f64>,
    pub truth: Vec<f64>,
    pub values: Vec<f64>,
    pub sigma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HarmonicConfig {
    pub t_end: f64,
    /// Known initial value.
    pub x0: f64,
    pub neurons: usize,
    pub activation: Activation,
    pub init: InitDistribution,
    /// Activation-domain image of `[0, t_end]`.
    pub domain: [f64; 2],
    /// Evenly spaced collocation points on `[0, t_end]`.
    pub collocation: usize,
    pub weights: LossWeights,
    /// Starting value of `k` for the inverse problem; the known value otherwise.
    pub k_init: f64,
    /// Bound on a single Gauss-Newton move of `log k`.
    pub max_log_step: f64,
    /// Output grid size for reconstructions.
    pub output_points: usize,
    pub newton: NewtonOptions,
}

impl Default for HarmonicConfig {
    fn default() -> Self {
        Self {
            t_end: 10.0,
            x0: 10.0,
            neurons: 20,
            activation: Activation::Tanh,
            init: InitDistribution::UniformSymmetric { bound: 1.0 },
            domain: [-1.0, 1.0],
            collocation: 201,
            weights: LossWeights::default(),
            k_init: 0.5,
            max_log_step: 0.5,
            output_points: 201,
            newton: NewtonOptions::default(),
        }
    }
}

impl HarmonicConfig {
    /// Richer basis for resolving `delta` from dense noiseless data. On sparse
    /// noisy data it overfits; use the default there.
    pub fn dense_discrepancy() -> Self {
        Self {
            neurons: 120,
            init: InitDistribution::UniformSymmetric { bound: 5.0 },
            collocation: 1001,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_end.is_finite() && self.t_end > 0.0) {
            return Err(config_err("t_end must be positive"));
        }
        if self.neurons == 0 {
            return Err(config_err("at least one neuron is required"));
        }
        self.init.validate()?;
        self.weights.validate()?;
        if self.collocation < 2 || self.output_points < 2 {
            return Err(config_err("collocation and output grids need at least 2 points"));
        }
        if !(self.k_init.is_finite() && self.k_init > 0.0) {
            return Err(config_err("k_init must be positive"));
        }
        if !(self.max_log_step.is_finite() && self.max_log_step > 0.0) {
            return Err(config_err("max_log_step must be positive"));
        }
        self.timemap().map(|_| ())
    }

    fn timemap(&self) -> Result<TimeMap> {
        TimeMap::with_domain(0.0, self.t_end, self.domain[0], self.domain[1])
    }

    fn grid(n: usize, t_end: f64) -> Vec<f64> {
        (0..n).map(|i| t_end * i as f64 / (n - 1) as f64).collect()
    }

    pub fn collocation_times(&self) -> Vec<f64> {
        Self::grid(self.collocation, self.t_end)
    }

    pub fn output_times(&self) -> Vec<f64> {
        Self::grid(self.output_points, self.t_end)
    }

    /// Draws the state basis (and a discrepancy basis of `disc_neurons`, if
    /// nonzero) for replicate stream `index`.
    pub fn bases(&self, seed: u64, index: u32, disc_neurons: usize) -> Result<(RandomBasis, Option<RandomBasis>)> {
        let streams = RngStreams::new(seed);
        let state = RandomBasis::build_with_rng(
            self.neurons,
            self.activation,
            &self.init,
            &mut streams.rng(Purpose::StateBasis, index),
        )?;
        let disc = if disc_neurons > 0 {
            Some(RandomBasis::build_with_rng(
                disc_neurons,
                self.activation,
                &self.init,
                &mut streams.rng(Purpose::DiscrepancyBasis, index),
            )?)
        } else {
            None
        };
        Ok((state, disc))
    }
}

/// Which right-hand side terms are unknown.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Unknowns {
    /// `[beta | log k]`.
    LogK,
    /// `[beta]` or `[beta | gamma]` with `k` fixed.
    FixedK { k: f64 },
}

/// Feature matrices of one basis on a set of times.
struct Design {
    /// `sigma(t) - sigma(0)`.
    phi: DMatrix<f64>,
    /// `d sigma / dt`.
    psi: DMatrix<f64>,
    /// `sigma(t)`, used by the discrepancy expansion.
    sigma: DMatrix<f64>,
}

impl Design {
    fn new(basis: &RandomBasis, map: &TimeMap, times: &[f64]) -> Self {
        let n = basis.len();
        let (s0, _) = basis.eval_features(map, 0.0);
        let mut phi = DMatrix::zeros(times.len(), n);
        let mut psi = DMatrix::zeros(times.len(), n);
        let mut sigma = DMatrix::zeros(times.len(), n);
        let mut s = vec![0.0; n];
        let mut d = vec![0.0; n];
        for (i, &t) in times.iter().enumerate() {
            basis.eval_features_into(map, t, &mut s, &mut d);
            for j in 0..n {
                phi[(i, j)] = s[j] - s0[j];
                psi[(i, j)] = d[j];
                sigma[(i, j)] = s[j];
            }
        }
        Self { phi, psi, sigma }
    }
}

/// A fitted single-domain model.
#[derive(Debug, Clone, PartialEq)]
pub struct HarmonicFit {
    pub basis: RandomBasis,
    pub disc_basis: Option<RandomBasis>,
    pub timemap: TimeMap,
    pub x0: f64,
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    pub k: f64,
    /// Root-mean-square data misfit.
    pub data_rms: f64,
    pub diagnostics: NewtonDiagnostics,
}

impl HarmonicFit {
    pub fn x(&self, t: f64) -> f64 {
        let (s, _) = self.basis.eval_features(&self.timemap, t);
        let (s0, _) = self.basis.eval_features(&self.timemap, 0.0);
        self.x0 + s.iter().zip(&s0).zip(&self.beta).map(|((a, b), w)| (a - b) * w).sum::<f64>()
    }

    pub fn dx(&self, t: f64) -> f64 {
        let (_, d) = self.basis.eval_features(&self.timemap, t);
        d.iter().zip(&self.beta).map(|(a, w)| a * w).sum()
    }

    /// Learned discrepancy, zero when none was fitted.
    pub fn delta(&self, t: f64) -> f64 {
        match &self.disc_basis {
            Some(b) => {
                let (s, _) = b.eval_features(&self.timemap, t);
                s.iter().zip(&self.gamma).map(|(a, w)| a * w).sum()
            }
            None => 0.0,
        }
    }

    fn signals(&self, times: &[f64]) -> SignalSet {
        let mut names = vec!["x".to_string()];
        let mut values = vec![times.iter().map(|&t| self.x(t)).collect::<Vec<_>>()];
        if self.disc_basis.is_some() {
            names.push("delta".into());
            values.push(times.iter().map(|&t| self.delta(t)).collect());
        }
        let units = vec!["-".to_string(); names.len()];
        SignalSet { names, units, times: times.to_vec(), values }
    }
}

fn row_weight(lambda: f64, rows: usize) -> f64 {
    (lambda / rows as f64).sqrt()
}

/// Fits one replicate.
fn fit(
    data: &HarmonicData,
    config: &HarmonicConfig,
    basis: RandomBasis,
    disc_basis: Option<RandomBasis>,
    unknowns: Unknowns,
) -> Result<HarmonicFit> {
    config.validate()?;
    if data.times.is_empty() || data.times.len() != data.values.len() {
        return Err(Error::Input("observation times and values must be non-empty and of equal length".into()));
    }
    if data.times.iter().any(|&t| !(0.0..=config.t_end).contains(&t)) {
        return Err(Error::Input(format!("observation times must lie in [0, {}]", config.t_end)));
    }
    let map = config.timemap()?;
    let tc = config.collocation_times();
    let colloc = Design::new(&basis, &map, &tc);
    let obs = Design::new(&basis, &map, &data.times);
    let disc = disc_basis.as_ref().map(|b| Design::new(b, &map, &tc));

    let n = basis.len();
    let nd = disc_basis.as_ref().map_or(0, RandomBasis::len);
    let has_k = matches!(unknowns, Unknowns::LogK);
    let cols = n + nd + usize::from(has_k);
    let (nc, no) = (tc.len(), data.times.len());
    let we = row_weight(config.weights.lambda_eq, nc);
    let wd = row_weight(config.weights.lambda_data, no);
    let y = DVector::from_column_slice(&data.values);

    let eval = |u: &DVector<f64>| -> Result<(DVector<f64>, DMatrix<f64>)> {
        let beta = u.rows(0, n);
        let k = match unknowns {
            Unknowns::LogK => u[n + nd].exp(),
            Unknowns::FixedK { k } => k,
        };
        let mut r = DVector::zeros(nc + no);
        let mut jac = DMatrix::zeros(nc + no, cols);
        let dx = &colloc.psi * beta;
        let delta = disc.as_ref().map(|d| &d.sigma * u.rows(n, nd));
        for (i, &t) in tc.iter().enumerate() {
            let (s, c) = (k * t).sin_cos();
            let mut res = dx[i] - c / k;
            if let Some(d) = &delta {
                res -= d[i];
            }
            r[i] = we * res;
            jac.view_mut((i, 0), (1, n)).copy_from(&(colloc.psi.row(i) * we));
            if let Some(d) = &disc {
                jac.view_mut((i, n), (1, nd)).copy_from(&(d.sigma.row(i) * -we));
            }
            if has_k {
                // d/dlog k of -cos(kt)/k
                jac[(i, n + nd)] = we * (t * s + c / k);
            }
        }
        let x = obs.phi.clone() * beta;
        for j in 0..no {
            r[nc + j] = wd * (config.x0 + x[j] - y[j]);
            jac.view_mut((nc + j, 0), (1, n)).copy_from(&(obs.phi.row(j) * wd));
        }
        Ok((r, jac))
    };

    let mut u0 = DVector::zeros(cols);
    if has_k {
        u0[n + nd] = config.k_init.ln();
    }
    let max_step = config.max_log_step;
    let (u, diagnostics) = gauss_newton(
        u0,
        eval,
        |_, step| {
            if has_k {
                let s = &mut step[n + nd];
                *s = s.clamp(-max_step, max_step);
            }
        },
        &config.newton,
    )?;
    let k = match unknowns {
        Unknowns::LogK => u[n + nd].exp(),
        Unknowns::FixedK { k } => k,
    };
    if !k.is_finite() || u.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite harmonic fit".into()));
    }
    let beta: Vec<f64> = u.rows(0, n).iter().copied().collect();
    let x = &obs.phi * u.rows(0, n);
    let data_rms = ((0..no).map(|j| (config.x0 + x[j] - y[j]).powi(2)).sum::<f64>() / no as f64).sqrt();
    Ok(HarmonicFit {
        basis,
        disc_basis,
        timemap: map,
        x0: config.x0,
        beta,
        gamma: u.rows(n, nd).iter().copied().collect(),
        k,
        data_rms,
        diagnostics,
    })
}

/// Recovers `x(t)` and `k` from one data set with one basis.
pub fn fit_k(data: &HarmonicData, config: &HarmonicConfig, basis: RandomBasis) -> Result<HarmonicFit> {
    fit(data, config, basis, None, Unknowns::LogK)
}

/// Fits `x(t)` and `delta(t)` with `k` fixed; `disc_basis = None` forces `delta = 0`.
pub fn fit_discrepancy(
    data: &HarmonicData,
    config: &HarmonicConfig,
    k: f64,
    basis: RandomBasis,
    disc_basis: Option<RandomBasis>,
) -> Result<HarmonicFit> {
    if !(k.is_finite() && k > 0.0) {
        return Err(config_err(format!("k must be positive, got {k}")));
    }
    fit(data, config, basis, disc_basis, Unknowns::FixedK { k })
}

/// Monte-Carlo summary of a harmonic run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HarmonicEnsemble {
    pub k_values: Vec<f64>,
    pub k_mean: f64,
    pub k_std: f64,
    /// Bands of `x` (and `delta` for discrepancy runs) on the output grid.
    pub bands: UncertaintyBands,
    /// Root-mean-square data misfit averaged over replicates.
    pub data_rms: f64,
    pub failures: Vec<ReplicateFailure>,
}

impl HarmonicEnsemble {
    /// Mean 5-95% width of signal `name` over unobserved output times (all
    /// times when the data cover the whole interval).
    pub fn unobserved_band_width(&self, name: &str, data: &HarmonicDataSpec) -> f64 {
        let s = self.bands.index_of(name).expect("signal present");
        self.bands.mean_band_width(s, &unobserved_indices(&self.bands.times, data))
    }

    /// Mean `|mean - truth|` of `x` over unobserved output times.
    pub fn unobserved_error(&self, data: &HarmonicDataSpec) -> f64 {
        let idx = unobserved_indices(&self.bands.times, data);
        let s = self.bands.index_of("x").expect("x present");
        idx.iter()
            .map(|&i| (self.bands.mean[s][i] - data.model.eval(data.k, data.x0, self.bands.times[i])).abs())
            .sum::<f64>()
            / idx.len() as f64
    }
}

fn unobserved_indices(times: &[f64], data: &HarmonicDataSpec) -> Vec<usize> {
    let idx: Vec<usize> = (0..times.len()).filter(|&i| data.unobserved(times[i])).collect();
    if idx.is_empty() {
        (0..times.len()).collect()
    } else {
        idx
    }
}

fn summarise(fits: Vec<(SignalSet, f64, f64)>, failures: Vec<ReplicateFailure>, sigma: f64) -> Result<HarmonicEnsemble> {
    let k_values: Vec<f64> = fits.iter().map(|f| f.1).collect();
    let data_rms = fits.iter().map(|f| f.2).sum::<f64>() / fits.len().max(1) as f64;
    let members: Vec<SignalSet> = fits.into_iter().map(|f| f.0).collect();
    let aleatoric: Vec<f64> = members
        .first()
        .map(|m| m.names.iter().map(|n| if n == "x" { sigma } else { 0.0 }).collect())
        .unwrap_or_default();
    let bands = decompose(&members, &aleatoric, &[])?;
    let (k_mean, k_std) = mean_std(&k_values);
    Ok(HarmonicEnsemble { k_values, k_mean, k_std, bands, data_rms, failures })
}

/// Joint recovery of `x` and `k` over an ensemble of noise draws and bases.
pub fn estimate_k(data: &HarmonicDataSpec, config: &HarmonicConfig, ensemble: &EnsembleSpec) -> Result<HarmonicEnsemble> {
    config.validate()?;
    data.validate(config.t_end)?;
    let out = config.output_times();
    let ens = run_ensemble(ensemble, |s| {
        let d = data.generate(config.t_end, ensemble.seed, s.noise)?;
        let (basis, _) = config.bases(ensemble.seed, s.basis, 0)?;
        let f = fit_k(&d, config, basis)?;
        Ok((f.signals(&out), f.k, f.data_rms))
    })?;
    summarise(ens.members, ens.failures, data.sigma(config.t_end))
}

/// One entry of a physics-weight sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub lambda_eq: f64,
    /// Mean `|mean - truth|` over unobserved times.
    pub gap_error: f64,
    /// Mean 5-95% band width over unobserved times.
    pub gap_band_width: f64,
    pub result: HarmonicEnsemble,
}

/// Repeats [`estimate_k`] for each `lambda_eq` with `lambda_data` fixed. All
/// entries share seeds.
pub fn lambda_sweep(
    data: &HarmonicDataSpec,
    lambdas: &[f64],
    config: &HarmonicConfig,
    ensemble: &EnsembleSpec,
) -> Result<Vec<SweepEntry>> {
    if lambdas.is_empty() {
        return Err(config_err("lambda sweep needs at least one value"));
    }
    lambdas
        .iter()
        .map(|&lambda_eq| {
            let cfg = HarmonicConfig { weights: LossWeights { lambda_eq, ..config.weights }, ..*config };
            let result = estimate_k(data, &cfg, ensemble)?;
            Ok(SweepEntry {
                lambda_eq,
                gap_error: result.unobserved_error(data),
                gap_band_width: result.unobserved_band_width("x", data),
                result,
            })
        })
        .collect()
}

/// Discrepancy learning setup.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscrepancySetup {
    /// Fixed value of `k` used in the (misspecified) linear equation.
    pub k: f64,
    /// Neurons of the discrepancy expansion; zero forces `delta = 0`.
    pub neurons: usize,
}

impl Default for DiscrepancySetup {
    fn default() -> Self {
        Self { k: 1.0, neurons: 20 }
    }
}

impl DiscrepancySetup {
    /// `delta = 0`: the misspecified linear model alone.
    pub fn disabled(k: f64) -> Self {
        Self { k, neurons: 0 }
    }
}

/// Fits nonlinear-model data with the linear equation plus a learned `delta`.
pub fn learn_harmonic_discrepancy(
    data: &HarmonicDataSpec,
    setup: &DiscrepancySetup,
    config: &HarmonicConfig,
    ensemble: &EnsembleSpec,
) -> Result<HarmonicEnsemble> {
    config.validate()?;
    data.validate(config.t_end)?;
    let out = config.output_times();
    let ens = run_ensemble(ensemble, |s| {
        let d = data.generate(config.t_end, ensemble.seed, s.noise)?;
        let (basis, disc) = config.bases(ensemble.seed, s.basis, setup.neurons)?;
        let f = fit_discrepancy(&d, config, setup.k, basis, disc)?;
        Ok((f.signals(&out), f.k, f.data_rms))
    })?;
    summarise(ens.members, ens.failures, data.sigma(config.t_end))
}
