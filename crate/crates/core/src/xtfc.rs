//! X-TFC state, parameter and discrepancy estimation for the six-compartment model.
//!
//! The time span is cut into equal subdomains solved in order. On subdomain
//! `k` each pressure is a constrained expression anchored at the end state of
//! subdomain `k-1`, so the reconstruction is continuous by construction. The
//! unknowns of one subdomain are laid out as
//!
//! ```text
//! [beta_l beta_a beta_v beta_r beta_pa beta_pv | log theta | beta_delta]
//! ```
//!
//! and are found by Gauss-Newton on the stacked residual
//!
//! ```text
//! per collocation point:   w_i (P_i' - f_i(P, theta, t))        i = 1..6
//!                          w_d (delta' - (P_pa - P_pv) K / L_pv) inductive discrepancy only
//! per observation:         lambda_data (x_obs - P_i(t_obs))
//! per unknown parameter:   mu (log theta - log theta_prev)        when mu > 0
//! ```
//!
//! with `w_i = lambda_eq * s_i` in physical time, times `1/c` when equation
//! rows are expressed in the activation domain. Valve indicators are taken at
//! the current iterate and held fixed while differentiating.

use std::collections::BTreeSet;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{Activation, InitDistribution, RandomBasis};
use crate::cvsim6::{
    self, Compartment, CvSimParams, FlowSet, PulmResistance, StateTrace, ValveState, VolumeSet, MMHG_TO_BARYE,
};
use crate::error::{config_err, Error, Result};
use crate::newton::{gauss_newton, NewtonDiagnostics, NewtonOptions};
use crate::rng::{Purpose, RngStreams};
use crate::synth::{ObservationSet, UnknownParam};

/// Subdomain length, collocation points per subdomain and hidden neurons.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub h: f64,
    pub points: usize,
    pub neurons: usize,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(config_err(format!("subdomain length must be positive, got {}", self.h)));
        }
        if self.points < 2 {
            return Err(config_err("need at least two collocation points per subdomain"));
        }
        if self.neurons == 0 {
            return Err(config_err("need at least one neuron"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_eq: f64,
    pub lambda_data: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_eq: 1.0, lambda_data: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.lambda_eq) || !ok(self.lambda_data) {
            return Err(config_err("loss weights must be finite and non-negative"));
        }
        if self.lambda_eq == 0.0 && self.lambda_data == 0.0 {
            return Err(config_err("loss weights cannot both be zero"));
        }
        Ok(())
    }
}

/// Units of the equation rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EquationScaling {
    /// `dP/dt - f`, mmHg/s.
    #[default]
    Physical,
    /// `dP/dz - f/c`, mmHg per unit of the activation coordinate.
    ActivationDomain,
    /// `tau (dP/dt - f)` with `tau` in seconds.
    TimeScale(f64),
}

impl EquationScaling {
    /// Multiplier of the equation rows for subdomain length `h`.
    pub fn factor(self, h: f64) -> f64 {
        match self {
            EquationScaling::Physical => 1.0,
            EquationScaling::ActivationDomain => h / 2.0,
            EquationScaling::TimeScale(tau) => tau,
        }
    }
}

/// Additive correction to the pulmonary venous flow.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DiscrepancySpec {
    #[default]
    None,
    /// `delta(t) = sigma^T beta_delta`, free on every subdomain.
    Algebraic { neurons: usize },
    /// `delta` is a constrained expression continuous across subdomains with
    /// `delta' = (P_pa - P_pv) K / L_pv` enforced as an extra equation row and
    /// `L_pv = inductance_factor * r_pv`.
    Inductive { neurons: usize, inductance_factor: f64, delta0: f64, row_weight: f64 },
}

impl DiscrepancySpec {
    pub fn inductive_default(neurons: usize) -> Self {
        DiscrepancySpec::Inductive { neurons, inductance_factor: 10.0, delta0: 0.0, row_weight: 1.0 }
    }

    pub fn neurons(&self) -> usize {
        match *self {
            DiscrepancySpec::None => 0,
            DiscrepancySpec::Algebraic { neurons } | DiscrepancySpec::Inductive { neurons, .. } => neurons,
        }
    }

    pub fn is_inductive(&self) -> bool {
        matches!(self, DiscrepancySpec::Inductive { .. })
    }
}

/// Random-walk weight per unknown parameter. A zero weight drops the row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorWeights {
    pub r_pv: f64,
    pub c_a: f64,
}

impl Default for PriorWeights {
    fn default() -> Self {
        Self { r_pv: 1.0, c_a: 5.0 }
    }
}

impl PriorWeights {
    pub fn uniform(mu: f64) -> Self {
        Self { r_pv: mu, c_a: mu }
    }

    pub fn get(&self, p: UnknownParam) -> f64 {
        match p {
            UnknownParam::RPv => self.r_pv,
            UnknownParam::CA => self.c_a,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct XtfcConfig {
    pub grid: GridSpec,
    pub activation: Activation,
    pub init: InitDistribution,
    pub weights: LossWeights,
    pub equation_scaling: EquationScaling,
    /// Optional multipliers of the six equation rows.
    pub variable_scaling: Option<[f64; 6]>,
    /// Weights `mu` of the random-walk rows tying `log theta` to the previous subdomain.
    pub param_prior: PriorWeights,
    /// Starting values of the unknown parameters, as multiples of their nominal values.
    pub theta_init_factor: f64,
    /// Largest change of any `log theta` in one Newton update.
    pub max_log_step: f64,
    pub discrepancy: DiscrepancySpec,
    pub newton: NewtonOptions,
}

impl Default for XtfcConfig {
    fn default() -> Self {
        Self {
            grid: GridSpec { h: 0.001, points: 5, neurons: 5 },
            activation: Activation::Tanh,
            init: InitDistribution::UniformSymmetric { bound: 1.0 },
            weights: LossWeights::default(),
            equation_scaling: EquationScaling::default(),
            variable_scaling: None,
            param_prior: PriorWeights::default(),
            theta_init_factor: 1.0,
            max_log_step: 0.5,
            discrepancy: DiscrepancySpec::None,
            newton: NewtonOptions::default(),
        }
    }
}

impl XtfcConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.init.validate()?;
        self.weights.validate()?;
        if let Some(s) = self.variable_scaling {
            if s.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(config_err("variable scaling must be finite and non-negative"));
            }
        }
        if [self.param_prior.r_pv, self.param_prior.c_a].iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
            return Err(config_err("param_prior weights must be finite and non-negative"));
        }
        if !(self.theta_init_factor.is_finite() && self.theta_init_factor > 0.0) {
            return Err(config_err("theta_init_factor must be positive"));
        }
        if let EquationScaling::TimeScale(tau) = self.equation_scaling {
            if !(tau.is_finite() && tau > 0.0) {
                return Err(config_err("equation time scale must be positive"));
            }
        }
        if self.max_log_step.is_nan() || self.max_log_step <= 0.0 {
            return Err(config_err("max_log_step must be positive"));
        }
        match self.discrepancy {
            DiscrepancySpec::None => {}
            DiscrepancySpec::Algebraic { neurons } => {
                if neurons == 0 {
                    return Err(config_err("discrepancy needs at least one neuron"));
                }
            }
            DiscrepancySpec::Inductive { neurons, inductance_factor, delta0, row_weight } => {
                if neurons == 0 {
                    return Err(config_err("discrepancy needs at least one neuron"));
                }
                if !(inductance_factor > 0.0 && delta0.is_finite() && row_weight >= 0.0) {
                    return Err(config_err("inductive discrepancy needs a positive inductance factor"));
                }
            }
        }
        Ok(())
    }

    /// State and discrepancy bases for one replicate, from independent streams.
    pub fn build_bases(&self, seed: u64, replicate: u32) -> Result<Bases> {
        let streams = RngStreams::new(seed);
        let state = RandomBasis::build_with_rng(
            self.grid.neurons,
            self.activation,
            &self.init,
            &mut streams.rng(Purpose::StateBasis, replicate),
        )?;
        let discrepancy = match self.discrepancy.neurons() {
            0 => None,
            n => Some(RandomBasis::build_with_rng(
                n,
                self.activation,
                &self.init,
                &mut streams.rng(Purpose::DiscrepancyBasis, replicate),
            )?),
        };
        Ok(Bases { state, discrepancy })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bases {
    pub state: RandomBasis,
    pub discrepancy: Option<RandomBasis>,
}

/// Column layout of the unknown vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UnknownLayout {
    pub neurons: usize,
    pub params: Vec<UnknownParam>,
    pub disc_neurons: usize,
}

impl UnknownLayout {
    pub fn beta(&self, state: usize) -> std::ops::Range<usize> {
        state * self.neurons..(state + 1) * self.neurons
    }

    pub fn param(&self, j: usize) -> usize {
        6 * self.neurons + j
    }

    pub fn delta(&self) -> std::ops::Range<usize> {
        let s = 6 * self.neurons + self.params.len();
        s..s + self.disc_neurons
    }

    pub fn len(&self) -> usize {
        6 * self.neurons + self.params.len() + self.disc_neurons
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Features on the reference subdomain; every subdomain maps onto the same `z` grid.
#[derive(Debug, Clone)]
struct Features {
    /// `sigma(z_j) - sigma(z_0)`, points x neurons.
    phi: DMatrix<f64>,
    /// `sigma(z_j)`.
    sigma: DMatrix<f64>,
    /// `c * sigma'(z_j)`.
    psi: DMatrix<f64>,
    sigma0: DVector<f64>,
}

impl Features {
    fn new(basis: &RandomBasis, points: usize, c: f64) -> Self {
        let l = basis.len();
        let (mut phi, mut sigma, mut psi) =
            (DMatrix::zeros(points, l), DMatrix::zeros(points, l), DMatrix::zeros(points, l));
        let (mut s, mut d) = (vec![0.0; l], vec![0.0; l]);
        basis.eval_z_into(-1.0, &mut s, &mut d);
        let sigma0 = DVector::from_column_slice(&s);
        for j in 0..points {
            let z = -1.0 + 2.0 * j as f64 / (points - 1) as f64;
            basis.eval_z_into(z, &mut s, &mut d);
            for n in 0..l {
                sigma[(j, n)] = s[n];
                phi[(j, n)] = s[n] - sigma0[n];
                psi[(j, n)] = c * d[n];
            }
        }
        Self { phi, sigma, psi, sigma0 }
    }

    fn phi_at(&self, basis: &RandomBasis, z: f64) -> DVector<f64> {
        let l = basis.len();
        let (mut s, mut d) = (vec![0.0; l], vec![0.0; l]);
        basis.eval_z_into(z, &mut s, &mut d);
        DVector::from_iterator(l, s.iter().zip(self.sigma0.iter()).map(|(a, b)| a - b))
    }
}

/// One observation inside a subdomain with its precomputed features.
#[derive(Debug, Clone)]
struct ObsRow {
    state: usize,
    value: f64,
    phi: DVector<f64>,
}

/// Layout and reference features shared by all subdomains of a run.
#[derive(Debug, Clone)]
pub struct SubdomainContext {
    layout: UnknownLayout,
    feats: Features,
    disc_feats: Option<Features>,
    state_basis: RandomBasis,
    c: f64,
}

impl SubdomainContext {
    pub fn new(config: &XtfcConfig, bases: &Bases, unknowns: &[UnknownParam]) -> Result<Self> {
        config.validate()?;
        let grid = config.grid;
        if bases.state.len() != grid.neurons {
            return Err(config_err("state basis size does not match the grid"));
        }
        let disc_basis = match (config.discrepancy.neurons(), &bases.discrepancy) {
            (0, _) => None,
            (n, Some(b)) if b.len() == n => Some(b),
            _ => return Err(config_err("discrepancy basis missing or of the wrong size")),
        };
        let c = 2.0 / grid.h;
        Ok(Self {
            layout: UnknownLayout {
                neurons: grid.neurons,
                params: unknowns.to_vec(),
                disc_neurons: config.discrepancy.neurons(),
            },
            feats: Features::new(&bases.state, grid.points, c),
            disc_feats: disc_basis.map(|b| Features::new(b, grid.points, c)),
            state_basis: bases.state.clone(),
            c,
        })
    }

    pub fn layout(&self) -> &UnknownLayout {
        &self.layout
    }

    /// Problem on `[t_start, t_start + h]`. `observations` holds
    /// `(compartment, t, pressure)` with `t` inside the subdomain.
    #[allow(clippy::too_many_arguments)]
    pub fn problem<'a>(
        &'a self,
        params: &'a CvSimParams,
        config: &'a XtfcConfig,
        t_start: f64,
        x0: [f64; 6],
        delta0: f64,
        log_theta_prev: Vec<f64>,
        observations: &[(Compartment, f64, f64)],
    ) -> SubdomainProblem<'a> {
        let obs = observations
            .iter()
            .map(|&(comp, t, value)| ObsRow {
                state: comp.index(),
                value,
                phi: self.feats.phi_at(&self.state_basis, -1.0 + self.c * (t - t_start)),
            })
            .collect();
        SubdomainProblem {
            params,
            config,
            layout: &self.layout,
            feats: &self.feats,
            disc_feats: self.disc_feats.as_ref(),
            t_start,
            x0,
            delta0,
            log_theta_prev,
            obs,
        }
    }
}

/// Everything needed to evaluate the residual of one subdomain.
#[derive(Debug, Clone)]
pub struct SubdomainProblem<'a> {
    params: &'a CvSimParams,
    config: &'a XtfcConfig,
    layout: &'a UnknownLayout,
    feats: &'a Features,
    disc_feats: Option<&'a Features>,
    /// Subdomain start time.
    pub t_start: f64,
    /// States at the subdomain start.
    pub x0: [f64; 6],
    pub delta0: f64,
    pub log_theta_prev: Vec<f64>,
    obs: Vec<ObsRow>,
}

impl SubdomainProblem<'_> {
    pub fn n_points(&self) -> usize {
        self.config.grid.points
    }

    pub fn n_observations(&self) -> usize {
        self.obs.len()
    }

    /// Number of residual rows.
    pub fn n_rows(&self) -> usize {
        let per_point = 6 + usize::from(self.config.discrepancy.is_inductive());
        let prior = self.layout.params.iter().filter(|&&p| self.config.param_prior.get(p) > 0.0).count();
        self.n_points() * per_point + self.obs.len() + prior
    }

    fn point_time(&self, j: usize) -> f64 {
        self.t_start + self.config.grid.h * j as f64 / (self.n_points() - 1) as f64
    }

    /// Pressures at collocation point `j`.
    pub fn pressures(&self, u: &DVector<f64>, j: usize) -> [f64; 6] {
        let row = self.feats.phi.row(j);
        std::array::from_fn(|i| self.x0[i] + row.dot(&u.rows(self.layout.beta(i).start, self.layout.neurons).transpose()))
    }

    fn delta_value(&self, u: &DVector<f64>, j: usize) -> (f64, f64) {
        let Some(df) = self.disc_feats else { return (0.0, 0.0) };
        let bd = u.rows(self.layout.delta().start, self.layout.disc_neurons);
        match self.config.discrepancy {
            DiscrepancySpec::Algebraic { .. } => (df.sigma.row(j).transpose().dot(&bd), 0.0),
            DiscrepancySpec::Inductive { .. } => {
                (self.delta0 + df.phi.row(j).transpose().dot(&bd), df.psi.row(j).transpose().dot(&bd))
            }
            DiscrepancySpec::None => (0.0, 0.0),
        }
    }

    fn params_with(&self, u: &DVector<f64>) -> CvSimParams {
        let mut p = *self.params;
        for (j, name) in self.layout.params.iter().enumerate() {
            let v = u[self.layout.param(j)].exp();
            match name {
                UnknownParam::RPv => p.r_pv = v,
                UnknownParam::CA => p.c_a = v,
            }
        }
        p
    }

    fn eq_weights(&self) -> [f64; 6] {
        let base = self.config.weights.lambda_eq * self.config.equation_scaling.factor(self.config.grid.h);
        let s = self.config.variable_scaling.unwrap_or([1.0; 6]);
        std::array::from_fn(|i| base * s[i])
    }

    /// Valve states at each collocation point for the iterate `u`.
    pub fn valves(&self, u: &DVector<f64>) -> Vec<ValveState> {
        (0..self.n_points()).map(|j| ValveState::from_pressures(&self.pressures(u, j))).collect()
    }

    /// Residual vector with valves taken at `u`.
    pub fn residuals(&self, u: &DVector<f64>) -> DVector<f64> {
        self.evaluate(u, None, false).0
    }

    /// Residual and analytic Jacobian with valves taken at `u`.
    pub fn residuals_and_jacobian(&self, u: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let (r, j) = self.evaluate(u, None, true);
        (r, j.expect("requested"))
    }

    /// Residual with a prescribed valve configuration per collocation point.
    pub fn residuals_frozen(&self, u: &DVector<f64>, valves: &[ValveState]) -> DVector<f64> {
        self.evaluate(u, Some(valves), false).0
    }

    fn evaluate(
        &self,
        u: &DVector<f64>,
        valves_override: Option<&[ValveState]>,
        want_jac: bool,
    ) -> (DVector<f64>, Option<DMatrix<f64>>) {
        let lay = self.layout;
        let l = lay.neurons;
        let k = MMHG_TO_BARYE;
        let params = self.params_with(u);
        let w = self.eq_weights();
        let inductive = match self.config.discrepancy {
            DiscrepancySpec::Inductive { inductance_factor, row_weight, .. } => {
                let scale = self.config.equation_scaling.factor(self.config.grid.h);
                Some((inductance_factor * self.params.r_pv, self.config.weights.lambda_eq * row_weight * scale))
            }
            _ => None,
        };
        let has_delta = self.disc_feats.is_some();
        let n_rows = self.n_rows();
        let mut r = DVector::zeros(n_rows);
        let mut jac = want_jac.then(|| DMatrix::zeros(n_rows, lay.len()));
        let mut row = 0;

        for jp in 0..self.n_points() {
            let t = self.point_time(jp);
            let p = self.pressures(u, jp);
            let valves = match valves_override {
                Some(v) => v[jp],
                None => ValveState::from_pressures(&p),
            };
            let (delta, delta_dot) = self.delta_value(u, jp);
            let q_lin_pv = (p[4] - p[5]) * k / params.r_pv;
            let flows = cvsim6::flows_with_valves(&params, &p, &valves, q_lin_pv + delta);
            let f = cvsim6::rhs_from_flows(&params, &p, &flows, t);
            let phi = self.feats.phi.row(jp);
            let psi = self.feats.psi.row(jp);
            for i in 0..6 {
                let pdot = psi.dot(&u.rows(lay.beta(i).start, l).transpose());
                r[row + i] = w[i] * (pdot - f[i]);
            }
            if let Some(jm) = jac.as_mut() {
                let dfdp = cvsim6::state_jacobian(&params, &valves, t);
                for i in 0..6 {
                    for m in 0..6 {
                        let coef = dfdp[i][m];
                        let diag = if i == m { 1.0 } else { 0.0 };
                        if coef == 0.0 && diag == 0.0 {
                            continue;
                        }
                        for n in 0..l {
                            jm[(row + i, lay.beta(m).start + n)] = w[i] * (diag * psi[n] - coef * phi[n]);
                        }
                    }
                }
                for (jj, name) in lay.params.iter().enumerate() {
                    let col = lay.param(jj);
                    match name {
                        UnknownParam::RPv => {
                            // dQ_pv/dlog R = -Q_lin
                            jm[(row + 4, col)] = -w[4] * (q_lin_pv / (params.c_pa * k));
                            jm[(row + 5, col)] = -w[5] * (-q_lin_pv / (params.c_pv * k));
                        }
                        UnknownParam::CA => {
                            jm[(row + 1, col)] = -w[1] * (-f[1]);
                        }
                    }
                }
                if let (true, Some(df)) = (has_delta, self.disc_feats) {
                    let feat = if inductive.is_some() { df.phi.row(jp) } else { df.sigma.row(jp) };
                    for n in 0..lay.disc_neurons {
                        let col = lay.delta().start + n;
                        jm[(row + 4, col)] = -w[4] * (-feat[n] / (params.c_pa * k));
                        jm[(row + 5, col)] = -w[5] * (feat[n] / (params.c_pv * k));
                    }
                }
            }
            row += 6;
            if let Some((l_pv, wd)) = inductive {
                r[row] = wd * (delta_dot - (p[4] - p[5]) * k / l_pv);
                if let Some(jm) = jac.as_mut() {
                    let df = self.disc_feats.expect("inductive discrepancy has a basis");
                    for n in 0..lay.disc_neurons {
                        jm[(row, lay.delta().start + n)] = wd * df.psi[(jp, n)];
                    }
                    for n in 0..l {
                        jm[(row, lay.beta(4).start + n)] = -wd * k / l_pv * phi[n];
                        jm[(row, lay.beta(5).start + n)] = wd * k / l_pv * phi[n];
                    }
                }
                row += 1;
            }
        }

        let lambda_data = self.config.weights.lambda_data;
        for ob in &self.obs {
            let beta = u.rows(lay.beta(ob.state).start, l);
            let model = self.x0[ob.state] + ob.phi.dot(&beta);
            r[row] = lambda_data * (ob.value - model);
            if let Some(jm) = jac.as_mut() {
                for n in 0..l {
                    jm[(row, lay.beta(ob.state).start + n)] = -lambda_data * ob.phi[n];
                }
            }
            row += 1;
        }

        for (jj, &p) in lay.params.iter().enumerate() {
            let mu = self.config.param_prior.get(p);
            if mu == 0.0 {
                continue;
            }
            r[row] = mu * (u[lay.param(jj)] - self.log_theta_prev[jj]);
            if let Some(jm) = jac.as_mut() {
                jm[(row, lay.param(jj))] = mu;
            }
            row += 1;
        }
        debug_assert_eq!(row, n_rows);
        (r, jac)
    }
}

/// Solver statistics for one subdomain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubdomainDiagnostics {
    pub index: usize,
    pub iterations: usize,
    pub initial_residual: f64,
    pub final_residual: f64,
    pub converged: bool,
    pub non_monotone: bool,
    pub rank_deficient: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationResult {
    /// Reconstruction at every collocation point (shared subdomain ends counted once).
    pub trace: StateTrace,
    pub flows: Vec<FlowSet>,
    pub volumes: Vec<VolumeSet>,
    /// Learned discrepancy flow on the trace grid, mL/s.
    pub delta: Option<Vec<f64>>,
    pub unknowns: Vec<UnknownParam>,
    /// Point value of each unknown parameter per subdomain (physical units).
    pub theta_points: Vec<Vec<f64>>,
    /// Mean of the point values.
    pub theta_hat: Vec<f64>,
    pub diagnostics: Vec<SubdomainDiagnostics>,
}

impl EstimationResult {
    pub fn theta(&self, p: UnknownParam) -> Option<f64> {
        self.unknowns.iter().position(|&q| q == p).map(|i| self.theta_hat[i])
    }

    pub fn total_iterations(&self) -> usize {
        self.diagnostics.iter().map(|d| d.iterations).sum()
    }

    /// `t,P_*,Q_*,V_*[,delta]` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let mut header = String::from("t");
        for c in Compartment::ALL {
            header.push_str(&format!(",{}", c.pressure_name()));
        }
        for n in cvsim6::FLOW_NAMES {
            header.push_str(&format!(",{n}"));
        }
        for c in Compartment::ALL {
            header.push_str(&format!(",{}", c.volume_name()));
        }
        if self.delta.is_some() {
            header.push_str(",delta");
        }
        writeln!(w, "{header}")?;
        for i in 0..self.trace.len() {
            let mut line = format!("{}", self.trace.times[i]);
            for v in self.trace.states[i].iter().chain(&self.flows[i].as_array()).chain(&self.volumes[i].0) {
                line.push_str(&format!(",{v}"));
            }
            if let Some(d) = &self.delta {
                line.push_str(&format!(",{}", d[i]));
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    /// Structured summary: estimates, per-subdomain values and solver statistics.
    pub fn summary_json(&self) -> serde_json::Value {
        let params: serde_json::Map<String, serde_json::Value> = self
            .unknowns
            .iter()
            .enumerate()
            .map(|(i, p)| {
                (
                    p.name().to_string(),
                    serde_json::json!({ "estimate": self.theta_hat[i], "per_subdomain": self.theta_points[i] }),
                )
            })
            .collect();
        let iterations: Vec<usize> = self.diagnostics.iter().map(|d| d.iterations).collect();
        let residuals: Vec<f64> = self.diagnostics.iter().map(|d| d.final_residual).collect();
        serde_json::json!({
            "parameters": params,
            "subdomains": self.diagnostics.len(),
            "iterations": iterations,
            "final_residual_norms": residuals,
            "non_converged": self.diagnostics.iter().filter(|d| !d.converged).count(),
            "non_monotone": self.diagnostics.iter().filter(|d| d.non_monotone).count(),
        })
    }
}

/// What to estimate and from which data.
#[derive(Debug, Clone)]
pub struct EstimationProblem<'a> {
    /// Known parameters; unknown ones supply their nominal value.
    pub params: &'a CvSimParams,
    pub obs: &'a ObservationSet,
    pub unknowns: &'a BTreeSet<UnknownParam>,
    /// Initial state of the first subdomain.
    pub initial_state: [f64; 6],
    pub t0: f64,
    pub t_end: f64,
}

impl<'a> EstimationProblem<'a> {
    pub fn from_observations(
        params: &'a CvSimParams,
        obs: &'a ObservationSet,
        unknowns: &'a BTreeSet<UnknownParam>,
    ) -> Self {
        Self { params, obs, unknowns, initial_state: obs.initial_state, t0: obs.t0, t_end: obs.t_end }
    }

    /// Shortens the span to a whole number of subdomains of length `h`;
    /// observations past the new end are ignored.
    pub fn trimmed_to(mut self, h: f64) -> Self {
        let n = ((self.t_end - self.t0) / h + 1e-9).floor();
        self.t_end = self.t0 + n * h;
        self
    }
}

fn nominal(params: &CvSimParams, p: UnknownParam) -> f64 {
    match p {
        UnknownParam::RPv => params.r_pv,
        UnknownParam::CA => params.c_a,
    }
}

/// Marches over all subdomains and assembles the reconstruction.
pub fn estimate(problem: &EstimationProblem<'_>, config: &XtfcConfig, bases: &Bases) -> Result<EstimationResult> {
    config.validate()?;
    problem.params.validate()?;
    let grid = config.grid;
    let span = problem.t_end - problem.t0;
    let n_sub_f = span / grid.h;
    let n_sub = n_sub_f.round() as usize;
    if n_sub == 0 || (n_sub_f - n_sub as f64).abs() > 1e-6 * n_sub_f.max(1.0) {
        return Err(config_err(format!("span {span} s is not a whole number of subdomains of {} s", grid.h)));
    }
    if problem.initial_state.iter().any(|v| !v.is_finite()) {
        return Err(Error::Input("initial state must be finite".into()));
    }
    let unknowns: Vec<UnknownParam> = problem.unknowns.iter().copied().collect();
    let ctx = SubdomainContext::new(config, bases, &unknowns)?;
    let (layout, feats, disc_feats) = (&ctx.layout, &ctx.feats, ctx.disc_feats.as_ref());
    let c = 2.0 / grid.h;

    // observations grouped by subdomain; an observation at a shared end belongs to the earlier one
    let mut obs_by_sub: Vec<Vec<ObsRow>> = vec![Vec::new(); n_sub];
    for s in &problem.obs.series {
        let state = s.variable.index();
        for (&t, &v) in s.times.iter().zip(&s.values) {
            let x = (t - problem.t0) / grid.h;
            if x <= 1e-9 || x > n_sub as f64 + 1e-9 {
                continue;
            }
            let k = ((x - 1e-9).ceil() as usize).saturating_sub(1).min(n_sub - 1);
            let z = -1.0 + c * (t - (problem.t0 + k as f64 * grid.h));
            obs_by_sub[k].push(ObsRow { state, value: v, phi: feats.phi_at(&bases.state, z) });
        }
    }

    let mut u = DVector::zeros(layout.len());
    let theta_start: Vec<f64> = layout
        .params
        .iter()
        .map(|&p| (nominal(problem.params, p) * config.theta_init_factor).ln())
        .collect();
    for (j, v) in theta_start.iter().enumerate() {
        u[layout.param(j)] = *v;
    }
    let mut x0 = problem.initial_state;
    let mut delta0 = match config.discrepancy {
        DiscrepancySpec::Inductive { delta0, .. } => delta0,
        _ => 0.0,
    };
    let p = grid.points;
    let total_points = n_sub * (p - 1) + 1;
    let mut times = Vec::with_capacity(total_points);
    let mut states = Vec::with_capacity(total_points);
    let mut delta_trace = disc_feats.map(|_| Vec::with_capacity(total_points));
    let mut theta_points = vec![Vec::with_capacity(n_sub); layout.params.len()];
    let mut diagnostics = Vec::with_capacity(n_sub);

    for (k, obs) in obs_by_sub.into_iter().enumerate() {
        if config.weights.lambda_eq == 0.0 && obs.is_empty() {
            return Err(Error::IllPosed(format!("subdomain {k} has neither observations nor equation rows")));
        }
        let log_theta_prev: Vec<f64> = (0..layout.params.len()).map(|j| u[layout.param(j)]).collect();
        let sub = SubdomainProblem {
            params: problem.params,
            config,
            layout,
            feats,
            disc_feats,
            t_start: problem.t0 + k as f64 * grid.h,
            x0,
            delta0,
            log_theta_prev,
            obs,
        };
        let (u_new, diag) = solve_subdomain(&sub, &u, config).map_err(|e| Error::SubdomainFailure {
            index: k,
            reason: e.to_string(),
        })?;
        u = u_new;
        for j in 0..p - 1 {
            times.push(sub.point_time(j));
            states.push(sub.pressures(&u, j));
            if let Some(d) = delta_trace.as_mut() {
                d.push(sub.delta_value(&u, j).0);
            }
        }
        let end = sub.pressures(&u, p - 1);
        let delta_end = sub.delta_value(&u, p - 1).0;
        if k + 1 == n_sub {
            times.push(problem.t0 + n_sub as f64 * grid.h);
            states.push(end);
            if let Some(d) = delta_trace.as_mut() {
                d.push(delta_end);
            }
        }
        x0 = end;
        if config.discrepancy.is_inductive() {
            delta0 = delta_end;
        }
        for (j, series) in theta_points.iter_mut().enumerate() {
            series.push(u[layout.param(j)].exp());
        }
        diagnostics.push(SubdomainDiagnostics {
            index: k,
            iterations: diag.iterations,
            initial_residual: diag.residual_norms.first().copied().unwrap_or(0.0),
            final_residual: diag.final_residual(),
            converged: diag.converged,
            non_monotone: diag.non_monotone,
            rank_deficient: diag.rank_deficient,
        });
    }

    let theta_hat: Vec<f64> = theta_points.iter().map(|s| s.iter().sum::<f64>() / s.len() as f64).collect();
    let mut fitted = *problem.params;
    for (p, v) in layout.params.iter().zip(&theta_hat) {
        match p {
            UnknownParam::RPv => fitted.r_pv = *v,
            UnknownParam::CA => fitted.c_a = *v,
        }
    }
    let trace = StateTrace { times, states };
    let mut flows = cvsim6::state_trace_flows(&fitted, &PulmResistance::Linear, &trace)?;
    if let Some(d) = &delta_trace {
        for (q, dv) in flows.iter_mut().zip(d) {
            q.q_pv += dv;
        }
    }
    let volumes = cvsim6::state_trace_volumes(&fitted, &trace);
    Ok(EstimationResult {
        trace,
        flows,
        volumes,
        delta: delta_trace,
        unknowns: layout.params.clone(),
        theta_points,
        theta_hat,
        diagnostics,
    })
}

/// Gauss-Newton on one subdomain, warm-started from `u_init`.
pub fn solve_subdomain(
    sub: &SubdomainProblem<'_>,
    u_init: &DVector<f64>,
    config: &XtfcConfig,
) -> Result<(DVector<f64>, NewtonDiagnostics)> {
    let lay = sub.layout;
    let n_params = lay.params.len();
    let max_step = config.max_log_step;
    gauss_newton(
        u_init.clone(),
        |u| Ok(sub.residuals_and_jacobian(u)),
        |_, step| {
            for j in 0..n_params {
                let i = lay.param(j);
                step[i] = step[i].clamp(-max_step, max_step);
            }
        },
        &config.newton,
    )
}

/// Forward solve: known parameters, physics only, from `initial` over `[0, t_end]`.
pub fn forward_solve(
    params: &CvSimParams,
    initial: [f64; 6],
    t_end: f64,
    config: &XtfcConfig,
    bases: &Bases,
) -> Result<EstimationResult> {
    let obs = ObservationSet {
        series: Vec::new(),
        noise: crate::synth::NoiseModel::zero(),
        seed: 0,
        initial_state: initial,
        t0: 0.0,
        t_end,
    };
    let unknowns = BTreeSet::new();
    let cfg = XtfcConfig { discrepancy: DiscrepancySpec::None, ..config.clone() };
    let problem = EstimationProblem::from_observations(params, &obs, &unknowns);
    estimate(&problem, &cfg, bases)
}

/// Estimation with a flow discrepancy on the pulmonary venous resistor.
/// Requires observations of at least `P_a` and `P_pa`.
pub fn learn_discrepancy(
    problem: &EstimationProblem<'_>,
    config: &XtfcConfig,
    bases: &Bases,
) -> Result<EstimationResult> {
    if matches!(config.discrepancy, DiscrepancySpec::None) {
        return Err(config_err("learn_discrepancy needs an algebraic or inductive discrepancy"));
    }
    for c in [Compartment::A, Compartment::Pa] {
        if problem.obs.get(c).is_none() {
            return Err(Error::Input(format!("discrepancy learning needs observations of {c}")));
        }
    }
    estimate(problem, config, bases)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{NoiseModel, ObservedSeries};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn empty_obs(initial: [f64; 6], t_end: f64) -> ObservationSet {
        ObservationSet { series: Vec::new(), noise: NoiseModel::zero(), seed: 0, initial_state: initial, t0: 0.0, t_end }
    }

    struct Fixture {
        params: CvSimParams,
        config: XtfcConfig,
        layout: UnknownLayout,
        feats: Features,
        disc: Option<Features>,
        bases: Bases,
    }

    fn fixture(unknowns: &[UnknownParam], disc: DiscrepancySpec, scaling: EquationScaling) -> Fixture {
        let config = XtfcConfig {
            grid: GridSpec { h: 0.01, points: 6, neurons: 4 },
            discrepancy: disc,
            equation_scaling: scaling,
            param_prior: PriorWeights::uniform(0.3),
            ..XtfcConfig::default()
        };
        let bases = config.build_bases(5, 0).unwrap();
        let layout =
            UnknownLayout { neurons: 4, params: unknowns.to_vec(), disc_neurons: config.discrepancy.neurons() };
        let c = 2.0 / config.grid.h;
        let feats = Features::new(&bases.state, 6, c);
        let disc = bases.discrepancy.as_ref().map(|b| Features::new(b, 6, c));
        Fixture { params: CvSimParams::default(), config, layout, feats, disc, bases }
    }

    fn problem<'a>(fx: &'a Fixture, obs: Vec<ObsRow>, t_start: f64) -> SubdomainProblem<'a> {
        SubdomainProblem {
            params: &fx.params,
            config: &fx.config,
            layout: &fx.layout,
            feats: &fx.feats,
            disc_feats: fx.disc.as_ref(),
            t_start,
            x0: [12.0, 85.0, 5.5, 4.0, 15.0, 9.0],
            delta0: 3.0,
            log_theta_prev: fx.layout.params.iter().map(|_| 0.1).collect(),
            obs,
        }
    }

    fn random_u(fx: &Fixture, rng: &mut ChaCha8Rng) -> DVector<f64> {
        let mut u = DVector::from_fn(fx.layout.len(), |_, _| rng.random_range(-3.0..3.0));
        for (j, p) in fx.layout.params.iter().enumerate() {
            u[fx.layout.param(j)] = (nominal(&fx.params, *p) * rng.random_range(0.7..1.3)).ln();
        }
        u
    }

    fn check_fd(fx: &Fixture, sub: &SubdomainProblem<'_>, rng: &mut ChaCha8Rng) {
        let u = random_u(fx, rng);
        let valves = sub.valves(&u);
        let (r, jac) = sub.residuals_and_jacobian(&u);
        assert_eq!(r, sub.residuals_frozen(&u, &valves));
        for col in 0..fx.layout.len() {
            let h = 1e-6 * u[col].abs().max(1.0);
            let mut up = u.clone();
            let mut um = u.clone();
            up[col] += h;
            um[col] -= h;
            let fd = (sub.residuals_frozen(&up, &valves) - sub.residuals_frozen(&um, &valves)) / (2.0 * h);
            for row in 0..r.len() {
                let a = jac[(row, col)];
                let scale = a.abs().max(fd[row].abs());
                let row_scale = jac.row(row).amax();
                assert!(
                    (a - fd[row]).abs() <= 1e-4 * scale + 1e-7 * row_scale + 1e-9,
                    "row {row} col {col}: analytic {a} fd {}",
                    fd[row]
                );
            }
        }
    }

    fn obs_rows(fx: &Fixture, states: &[usize]) -> Vec<ObsRow> {
        states
            .iter()
            .enumerate()
            .map(|(i, &s)| ObsRow {
                state: s,
                value: 10.0 + i as f64,
                phi: fx.feats.phi_at(&fx.bases.state, -0.3 + 0.2 * i as f64),
            })
            .collect()
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let variants = [
            (vec![UnknownParam::RPv], DiscrepancySpec::None, EquationScaling::Physical),
            (vec![UnknownParam::RPv, UnknownParam::CA], DiscrepancySpec::None, EquationScaling::ActivationDomain),
            (vec![], DiscrepancySpec::Algebraic { neurons: 3 }, EquationScaling::ActivationDomain),
            (vec![UnknownParam::CA], DiscrepancySpec::inductive_default(3), EquationScaling::TimeScale(0.02)),
        ];
        for (unknowns, disc, scaling) in variants {
            let fx = fixture(&unknowns, disc, scaling);
            for trial in 0..25 {
                let sub = problem(&fx, obs_rows(&fx, &[1, 4, 4]), 0.05 * trial as f64);
                check_fd(&fx, &sub, &mut rng);
            }
        }
    }

    #[test]
    fn row_count_and_layout() {
        let fx = fixture(&[UnknownParam::RPv], DiscrepancySpec::inductive_default(3), EquationScaling::Physical);
        let sub = problem(&fx, obs_rows(&fx, &[1, 4]), 0.0);
        // prior weight is positive in the fixture
        assert_eq!(sub.n_rows(), 6 * 7 + 2 + 1);
        let u = DVector::zeros(fx.layout.len());
        let (r, j) = sub.residuals_and_jacobian(&u);
        assert_eq!(r.len(), sub.n_rows());
        assert_eq!(j.ncols(), 6 * 4 + 1 + 3);

        let fx = fixture(&[], DiscrepancySpec::None, EquationScaling::Physical);
        let sub = problem(&fx, Vec::new(), 0.0);
        assert_eq!(sub.n_rows(), 6 * 6);
        assert_eq!(sub.residuals_and_jacobian(&DVector::zeros(24)).1.ncols(), 24);
    }

    #[test]
    fn venous_row_does_not_depend_on_pulmonary_arterial_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let fx = fixture(&[UnknownParam::RPv, UnknownParam::CA], DiscrepancySpec::None, EquationScaling::Physical);
        let sub = problem(&fx, Vec::new(), 0.1);
        let u = random_u(&fx, &mut rng);
        let (_, j) = sub.residuals_and_jacobian(&u);
        for pt in 0..sub.n_points() {
            let row = pt * 6 + 2;
            for col in fx.layout.beta(4) {
                assert_eq!(j[(row, col)], 0.0);
            }
            // only the arterial row sees C_a
            for i in [0, 2, 3, 4, 5] {
                assert_eq!(j[(pt * 6 + i, fx.layout.param(1))], 0.0);
            }
        }
    }

    #[test]
    fn zero_weights_give_pure_equation_residual_at_initial_state() {
        let fx = fixture(&[], DiscrepancySpec::None, EquationScaling::Physical);
        let sub = problem(&fx, Vec::new(), 0.2);
        let r = sub.residuals(&DVector::zeros(24));
        for j in 0..sub.n_points() {
            let f = cvsim6::rhs(&fx.params, &PulmResistance::Linear, &cvsim6::PressureState(sub.x0), sub.point_time(j))
                .unwrap();
            for i in 0..6 {
                assert!((r[6 * j + i] + f[i]).abs() < 1e-9 * f[i].abs().max(1.0));
            }
        }
    }

    #[test]
    fn ill_posed_without_physics_or_data() {
        let cfg = XtfcConfig {
            grid: GridSpec { h: 0.01, points: 4, neurons: 3 },
            weights: LossWeights { lambda_eq: 0.0, lambda_data: 1.0 },
            ..XtfcConfig::default()
        };
        let bases = cfg.build_bases(1, 0).unwrap();
        let params = CvSimParams::default();
        let obs = empty_obs([5.0; 6], 0.05);
        let unknowns = BTreeSet::new();
        let problem = EstimationProblem::from_observations(&params, &obs, &unknowns);
        assert!(matches!(estimate(&problem, &cfg, &bases), Err(Error::IllPosed(_))));
    }

    #[test]
    fn physics_off_reduces_to_regression() {
        // one subdomain, dense observations of a smooth curve, no equation rows
        let cfg = XtfcConfig {
            grid: GridSpec { h: 0.1, points: 4, neurons: 6 },
            weights: LossWeights { lambda_eq: 0.0, lambda_data: 1.0 },
            ..XtfcConfig::default()
        };
        let bases = cfg.build_bases(2, 0).unwrap();
        let params = CvSimParams::default();
        let times: Vec<f64> = (0..=40).map(|i| i as f64 * 0.0025).collect();
        let series: Vec<ObservedSeries> = Compartment::ALL
            .into_iter()
            .map(|c| ObservedSeries {
                variable: c,
                times: times.clone(),
                values: times.iter().map(|t| 10.0 + c.index() as f64 + (20.0 * t).sin()).collect(),
            })
            .collect();
        let init: [f64; 6] = std::array::from_fn(|i| 10.0 + i as f64);
        let obs = ObservationSet { series, noise: NoiseModel::zero(), seed: 0, initial_state: init, t0: 0.0, t_end: 0.1 };
        let unknowns = BTreeSet::new();
        let problem = EstimationProblem::from_observations(&params, &obs, &unknowns);
        let res = estimate(&problem, &cfg, &bases).unwrap();
        // oracle: plain least squares on (sigma - sigma0) features
        let c = 2.0 / 0.1;
        let feats = Features::new(&bases.state, 4, c);
        let a = DMatrix::from_fn(40, 6, |r, n| feats.phi_at(&bases.state, -1.0 + c * times[r + 1])[n]);
        for (s, &x0) in init.iter().enumerate() {
            let b = DVector::from_fn(40, |r, _| obs.series[s].values[r + 1] - x0);
            let beta = crate::lsq::solve_min_norm(&a, &b).unwrap().solution;
            for (i, &t) in res.trace.times.iter().enumerate() {
                let expected = x0 + feats.phi_at(&bases.state, -1.0 + c * t).dot(&beta);
                assert!((res.trace.states[i][s] - expected).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn marching_is_continuous_and_exact_at_start() {
        let cfg = XtfcConfig { grid: GridSpec { h: 0.01, points: 6, neurons: 6 }, ..XtfcConfig::default() };
        let bases = cfg.build_bases(4, 1).unwrap();
        let params = CvSimParams::default();
        let init = [8.0, 85.0, 6.0, 4.0, 15.0, 9.0];
        let res = forward_solve(&params, init, 0.2, &cfg, &bases).unwrap();
        assert_eq!(res.trace.states[0], init);
        assert_eq!(res.trace.len(), 20 * 5 + 1);
        assert!(res.diagnostics.iter().all(|d| d.converged));
    }

    #[test]
    fn learn_discrepancy_requires_systemic_and_pulmonary_arterial_data() {
        let cfg = XtfcConfig { discrepancy: DiscrepancySpec::Algebraic { neurons: 3 }, ..XtfcConfig::default() };
        let bases = cfg.build_bases(1, 0).unwrap();
        let params = CvSimParams::default();
        let obs = empty_obs([5.0; 6], 0.01);
        let unknowns = BTreeSet::new();
        let problem = EstimationProblem::from_observations(&params, &obs, &unknowns);
        assert!(matches!(learn_discrepancy(&problem, &cfg, &bases), Err(Error::Input(_))));
    }
}
