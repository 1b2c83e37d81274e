//! Six-compartment lumped-parameter circulation model.
//!
//! Pressures are carried in mmHg, resistances in Barye·s/mL and capacitances
//! in mL/Barye, so flows pick up a factor [`MMHG_TO_BARYE`]:
//! `Q [mL/s] = dP [mmHg] * 1333.22 / R`.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::ode::{self, SolverStats, Tolerance};

pub const MMHG_TO_BARYE: f64 = 1333.22;
pub const ML_PER_S_TO_L_PER_MIN: f64 = 60.0 / 1000.0;
/// Beats discarded before recording; the venous pool settles slowly.
pub const DEFAULT_WARMUP_CYCLES: usize = 50;

/// Compartment index into a six-pressure state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Compartment {
    L,
    A,
    V,
    R,
    Pa,
    Pv,
}

impl Compartment {
    pub const ALL: [Compartment; 6] =
        [Compartment::L, Compartment::A, Compartment::V, Compartment::R, Compartment::Pa, Compartment::Pv];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn pressure_name(self) -> &'static str {
        ["P_l", "P_a", "P_v", "P_r", "P_pa", "P_pv"][self.index()]
    }

    pub fn volume_name(self) -> &'static str {
        ["V_l", "V_a", "V_v", "V_r", "V_pa", "V_pv"][self.index()]
    }

    pub fn from_pressure_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.pressure_name() == name)
    }
}

impl fmt::Display for Compartment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.pressure_name())
    }
}

pub const FLOW_NAMES: [&str; 6] = ["Q_l_in", "Q_l_out", "Q_a", "Q_r_in", "Q_r_out", "Q_pv"];

/// The 23 model parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CvSimParams {
    /// Heart rate, beats/min.
    pub hr: f64,
    /// Transthoracic pressure, mmHg.
    pub p_th: f64,
    /// Systolic fraction of the cardiac cycle.
    pub r_sys: f64,
    pub c_l_dia: f64,
    pub c_l_sys: f64,
    pub c_a: f64,
    pub c_v: f64,
    pub c_r_dia: f64,
    pub c_r_sys: f64,
    pub c_pa: f64,
    pub c_pv: f64,
    pub r_l_in: f64,
    pub r_l_out: f64,
    pub r_a: f64,
    pub r_r_in: f64,
    pub r_r_out: f64,
    pub r_pv: f64,
    pub v0_l: f64,
    pub v0_a: f64,
    pub v0_v: f64,
    pub v0_r: f64,
    pub v0_pa: f64,
    pub v0_pv: f64,
}

impl Default for CvSimParams {
    fn default() -> Self {
        Self {
            hr: 72.00,
            p_th: -4.00,
            r_sys: 0.33,
            c_l_dia: 7.50e-3,
            c_l_sys: 3.00e-4,
            c_a: 1.20e-3,
            c_v: 7.50e-2,
            c_r_dia: 1.50e-2,
            c_r_sys: 9.00e-4,
            c_pa: 3.23e-3,
            c_pv: 6.30e-3,
            r_l_in: 13.33,
            r_l_out: 8.00,
            r_a: 1333.22,
            r_r_in: 66.66,
            r_r_out: 4.00,
            r_pv: 106.66,
            v0_l: 15.00,
            v0_a: 715.00,
            v0_v: 2500.00,
            v0_r: 15.00,
            v0_pa: 90.00,
            v0_pv: 490.00,
        }
    }
}

impl CvSimParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hr", self.hr),
            ("c_l_dia", self.c_l_dia),
            ("c_l_sys", self.c_l_sys),
            ("c_a", self.c_a),
            ("c_v", self.c_v),
            ("c_r_dia", self.c_r_dia),
            ("c_r_sys", self.c_r_sys),
            ("c_pa", self.c_pa),
            ("c_pv", self.c_pv),
            ("r_l_in", self.r_l_in),
            ("r_l_out", self.r_l_out),
            ("r_a", self.r_a),
            ("r_r_in", self.r_r_in),
            ("r_r_out", self.r_r_out),
            ("r_pv", self.r_pv),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(config_err(format!("{name} must be positive, got {v}")));
            }
        }
        // relaxation lasts half a systole and must end within the beat
        if !(self.r_sys > 0.0 && self.r_sys < 2.0 / 3.0) {
            return Err(config_err(format!("r_sys must lie in (0, 2/3), got {}", self.r_sys)));
        }
        if self.c_l_sys >= self.c_l_dia || self.c_r_sys >= self.c_r_dia {
            return Err(config_err("systolic capacitances must be below diastolic ones"));
        }
        if !self.p_th.is_finite() {
            return Err(config_err("p_th must be finite"));
        }
        Ok(())
    }

    /// Cardiac period in seconds.
    pub fn period(&self) -> f64 {
        60.0 / self.hr
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

/// Time-varying ventricular capacitance and its time derivative.
///
/// The waveform is shaped in elastance `E = 1/C`. With `Ts = r_sys*T`, `E`
/// rises along a half cosine from `1/C_dia` to `1/C_sys` over `[0, Ts)`, relaxes
/// back along a half cosine over `[Ts, 1.5 Ts)` and stays diastolic for the rest
/// of the beat. `E` is C¹, so `C_dot = -E_dot / E^2` is continuous.
pub fn ventricular_capacitance(params: &CvSimParams, side: Side, t: f64) -> (f64, f64) {
    let (dia, sys) = match side {
        Side::Left => (params.c_l_dia, params.c_l_sys),
        Side::Right => (params.c_r_dia, params.c_r_sys),
    };
    let period = params.period();
    let tau = t.rem_euclid(period);
    let t_sys = params.r_sys * period;
    let (e_dia, e_sys) = (1.0 / dia, 1.0 / sys);
    let half_amp = 0.5 * (e_sys - e_dia);
    let (e, e_dot) = if tau < t_sys {
        let w = std::f64::consts::PI / t_sys;
        let (s, c) = (w * tau).sin_cos();
        (e_dia + half_amp * (1.0 - c), half_amp * w * s)
    } else if tau < 1.5 * t_sys {
        let w = 2.0 * std::f64::consts::PI / t_sys;
        let (s, c) = (w * (tau - t_sys)).sin_cos();
        (e_dia + half_amp * (1.0 + c), -half_amp * w * s)
    } else {
        return (dia, 0.0);
    };
    (1.0 / e, -e_dot / (e * e))
}

/// Six pressures in mmHg, ordered as [`Compartment::ALL`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PressureState(pub [f64; 6]);

impl PressureState {
    /// All pressures at 5 mmHg except P_a = 80 and P_pa = 15.
    pub fn default_initial() -> Self {
        Self([5.0, 80.0, 5.0, 5.0, 15.0, 5.0])
    }

    pub fn get(&self, c: Compartment) -> f64 {
        self.0[c.index()]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowSet {
    pub q_l_in: f64,
    pub q_l_out: f64,
    pub q_a: f64,
    pub q_r_in: f64,
    pub q_r_out: f64,
    pub q_pv: f64,
}

impl FlowSet {
    pub fn as_array(&self) -> [f64; 6] {
        [self.q_l_in, self.q_l_out, self.q_a, self.q_r_in, self.q_r_out, self.q_pv]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumeSet(pub [f64; 6]);

/// Open/closed state of the four valves (`l_in`, `l_out`, `r_in`, `r_out`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ValveState {
    pub l_in: bool,
    pub l_out: bool,
    pub r_in: bool,
    pub r_out: bool,
}

impl ValveState {
    /// A valve is open when upstream pressure strictly exceeds downstream.
    pub fn from_pressures(p: &[f64; 6]) -> Self {
        Self { l_in: p[5] > p[0], l_out: p[0] > p[1], r_in: p[2] > p[3], r_out: p[3] > p[4] }
    }

    /// Packs the four flags into the low bits of an integer.
    pub fn bits(&self) -> u32 {
        self.l_in as u32 | (self.l_out as u32) << 1 | (self.r_in as u32) << 2 | (self.r_out as u32) << 3
    }

    pub fn from_bits(b: u32) -> Self {
        Self { l_in: b & 1 != 0, l_out: b & 2 != 0, r_in: b & 4 != 0, r_out: b & 8 != 0 }
    }

    fn gate(open: bool) -> f64 {
        if open {
            1.0
        } else {
            0.0
        }
    }
}

/// Pulmonary venous pressure-flow law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PulmResistance {
    /// Ohm's law with the constant `r_pv` of the parameter set.
    #[default]
    Linear,
    /// Flow-dependent resistance, piecewise linear in flow through
    /// `(q [L/min], R [Barye·s/mL])` points and constant beyond the end points.
    NonlinearInterp { points: Vec<(f64, f64)> },
}

impl PulmResistance {
    pub fn default_nonlinear() -> Self {
        PulmResistance::NonlinearInterp { points: vec![(0.12, 13.0), (5.8, 104.9), (19.8, 327.8)] }
    }

    pub fn validate(&self) -> Result<()> {
        if let PulmResistance::NonlinearInterp { points } = self {
            if points.is_empty() {
                return Err(config_err("nonlinear resistance needs at least one point"));
            }
            if points.windows(2).any(|w| w[1].0 <= w[0].0) {
                return Err(config_err("nonlinear resistance points must be strictly increasing in flow"));
            }
            if points.iter().any(|p| !(p.1 > 0.0 && p.0.is_finite() && p.1.is_finite())) {
                return Err(config_err("nonlinear resistance values must be positive"));
            }
            if points.windows(2).any(|w| w[1].1 < w[0].1) {
                return Err(config_err("nonlinear resistance must be non-decreasing in flow"));
            }
        }
        Ok(())
    }

    /// Resistance at flow `q_ml_s` (mL/s) for the interpolated law.
    pub fn resistance_at(points: &[(f64, f64)], q_ml_s: f64) -> f64 {
        let q = q_ml_s * ML_PER_S_TO_L_PER_MIN;
        let first = points[0];
        let last = points[points.len() - 1];
        if q <= first.0 {
            return first.1;
        }
        if q >= last.0 {
            return last.1;
        }
        let i = points.partition_point(|p| p.0 <= q) - 1;
        let (q0, r0) = points[i];
        let (q1, r1) = points[i + 1];
        r0 + (r1 - r0) * (q - q0) / (q1 - q0)
    }
}

/// Flow through the pulmonary venous resistor, mL/s.
///
/// For the interpolated law the flow solves `q * R(q) = dP`. Since `q R(q)`
/// is strictly increasing, the root is found by locating the bracketing
/// segment and solving its quadratic in closed form.
pub fn pulmonary_flow(params: &CvSimParams, pulm: &PulmResistance, p_pa: f64, p_pv: f64) -> Result<f64> {
    let dp = (p_pa - p_pv) * MMHG_TO_BARYE;
    match pulm {
        PulmResistance::Linear => Ok(dp / params.r_pv),
        PulmResistance::NonlinearInterp { points } => interp_flow(points, dp),
    }
}

fn interp_flow(points: &[(f64, f64)], dp: f64) -> Result<f64> {
    if points.is_empty() {
        return Err(config_err("nonlinear resistance needs at least one point"));
    }
    // breakpoints in mL/s
    let k = 1.0 / ML_PER_S_TO_L_PER_MIN;
    let first = points[0];
    let last = points[points.len() - 1];
    // below the first breakpoint (including reverse flow): constant resistance
    if dp <= first.0 * k * first.1 {
        return Ok(dp / first.1);
    }
    if dp >= last.0 * k * last.1 {
        return Ok(dp / last.1);
    }
    for w in points.windows(2) {
        let (qa, ra) = (w[0].0 * k, w[0].1);
        let (qb, rb) = (w[1].0 * k, w[1].1);
        if dp <= qb * rb {
            // R(q) = ra + s (q - qa);  s q^2 + (ra - s qa) q - dp = 0
            let s = (rb - ra) / (qb - qa);
            let lin = ra - s * qa;
            let q = if s.abs() < 1e-300 {
                dp / lin
            } else {
                let disc = lin * lin + 4.0 * s * dp;
                // numerically stable positive root
                2.0 * dp / (lin + disc.sqrt())
            };
            if !q.is_finite() {
                return Err(Error::Numerical(format!("pulmonary flow root is not finite for dP = {dp}")));
            }
            return Ok(q);
        }
    }
    Ok(dp / last.1)
}

/// Ohm's-law flows with valves evaluated at the given pressures.
pub fn compute_flows(params: &CvSimParams, pulm: &PulmResistance, s: &PressureState) -> Result<FlowSet> {
    let valves = ValveState::from_pressures(&s.0);
    let q_pv = pulmonary_flow(params, pulm, s.0[4], s.0[5])?;
    Ok(flows_with_valves(params, &s.0, &valves, q_pv))
}

/// Flows with a given valve configuration and precomputed pulmonary flow.
pub fn flows_with_valves(params: &CvSimParams, p: &[f64; 6], v: &ValveState, q_pv: f64) -> FlowSet {
    let k = MMHG_TO_BARYE;
    FlowSet {
        q_l_in: ValveState::gate(v.l_in) * (p[5] - p[0]) * k / params.r_l_in,
        q_l_out: ValveState::gate(v.l_out) * (p[0] - p[1]) * k / params.r_l_out,
        q_a: (p[1] - p[2]) * k / params.r_a,
        q_r_in: ValveState::gate(v.r_in) * (p[2] - p[3]) * k / params.r_r_in,
        q_r_out: ValveState::gate(v.r_out) * (p[3] - p[4]) * k / params.r_r_out,
        q_pv,
    }
}

/// Pressure derivatives (mmHg/s) from flows and ventricular capacitances.
pub fn rhs_from_flows(params: &CvSimParams, p: &[f64; 6], q: &FlowSet, t: f64) -> [f64; 6] {
    let k = MMHG_TO_BARYE;
    let (cl, cl_dot) = ventricular_capacitance(params, Side::Left, t);
    let (cr, cr_dot) = ventricular_capacitance(params, Side::Right, t);
    [
        (q.q_l_in - q.q_l_out) / (cl * k) - (p[0] - params.p_th) * cl_dot / cl,
        (q.q_l_out - q.q_a) / (params.c_a * k),
        (q.q_a - q.q_r_in) / (params.c_v * k),
        (q.q_r_in - q.q_r_out) / (cr * k) - (p[3] - params.p_th) * cr_dot / cr,
        (q.q_r_out - q.q_pv) / (params.c_pa * k),
        (q.q_pv - q.q_l_in) / (params.c_pv * k),
    ]
}

/// The six pressure ODEs, dP/dt in mmHg/s.
pub fn rhs(params: &CvSimParams, pulm: &PulmResistance, s: &PressureState, t: f64) -> Result<[f64; 6]> {
    let q = compute_flows(params, pulm, s)?;
    Ok(rhs_from_flows(params, &s.0, &q, t))
}

/// Right-hand side with a prescribed valve configuration.
pub fn rhs_with_valves(
    params: &CvSimParams,
    pulm: &PulmResistance,
    p: &[f64; 6],
    valves: &ValveState,
    t: f64,
) -> Result<[f64; 6]> {
    let q_pv = pulmonary_flow(params, pulm, p[4], p[5])?;
    let q = flows_with_valves(params, p, valves, q_pv);
    Ok(rhs_from_flows(params, p, &q, t))
}

/// `df/dP` for fixed valve states and a linear pulmonary resistor, 1/s.
///
/// Unit conversion cancels: each entry is a conductance over a capacitance.
pub fn state_jacobian(params: &CvSimParams, valves: &ValveState, t: f64) -> [[f64; 6]; 6] {
    let g = ValveState::gate;
    let (cl, cl_dot) = ventricular_capacitance(params, Side::Left, t);
    let (cr, cr_dot) = ventricular_capacitance(params, Side::Right, t);
    let g_lin = g(valves.l_in) / params.r_l_in;
    let g_lout = g(valves.l_out) / params.r_l_out;
    let g_a = 1.0 / params.r_a;
    let g_rin = g(valves.r_in) / params.r_r_in;
    let g_rout = g(valves.r_out) / params.r_r_out;
    let g_pv = 1.0 / params.r_pv;
    let mut j = [[0.0; 6]; 6];
    j[0][0] = -(g_lin + g_lout) / cl - cl_dot / cl;
    j[0][1] = g_lout / cl;
    j[0][5] = g_lin / cl;
    j[1][0] = g_lout / params.c_a;
    j[1][1] = -(g_lout + g_a) / params.c_a;
    j[1][2] = g_a / params.c_a;
    j[2][1] = g_a / params.c_v;
    j[2][2] = -(g_a + g_rin) / params.c_v;
    j[2][3] = g_rin / params.c_v;
    j[3][2] = g_rin / cr;
    j[3][3] = -(g_rin + g_rout) / cr - cr_dot / cr;
    j[3][4] = g_rout / cr;
    j[4][3] = g_rout / params.c_pa;
    j[4][4] = -(g_rout + g_pv) / params.c_pa;
    j[4][5] = g_pv / params.c_pa;
    j[5][0] = g_lin / params.c_pv;
    j[5][4] = g_pv / params.c_pv;
    j[5][5] = -(g_pv + g_lin) / params.c_pv;
    j
}

/// Stressed-volume relations, mL.
pub fn volumes(params: &CvSimParams, p: &[f64; 6], t: f64) -> VolumeSet {
    let k = MMHG_TO_BARYE;
    let (cl, _) = ventricular_capacitance(params, Side::Left, t);
    let (cr, _) = ventricular_capacitance(params, Side::Right, t);
    VolumeSet([
        params.v0_l + (p[0] - params.p_th) * cl * k,
        params.v0_a + (p[1] - params.p_th / 3.0) * params.c_a * k,
        params.v0_v + p[2] * params.c_v * k,
        params.v0_r + (p[3] - params.p_th) * cr * k,
        params.v0_pa + (p[4] - params.p_th) * params.c_pa * k,
        params.v0_pv + (p[5] - params.p_th) * params.c_pv * k,
    ])
}

/// Pressures sampled on a time grid.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StateTrace {
    pub times: Vec<f64>,
    pub states: Vec<[f64; 6]>,
}

impl StateTrace {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn column(&self, c: Compartment) -> Vec<f64> {
        self.states.iter().map(|s| s[c.index()]).collect()
    }

    /// Samples with `t` in `[t_start, t_end]`, time shifted so the first kept sample is `t - t_start`.
    pub fn window(&self, t_start: f64, t_end: f64) -> StateTrace {
        let eps = 1e-9;
        let mut out = StateTrace::default();
        for (t, s) in self.times.iter().zip(&self.states) {
            if *t >= t_start - eps && *t <= t_end + eps {
                out.times.push(t - t_start);
                out.states.push(*s);
            }
        }
        out
    }

    /// Writes `t,P_l,...,P_pv[,Q_*,V_*]` CSV. `time_offset` is added to stored
    /// times before evaluating the capacitance phase for volumes.
    pub fn write_csv<W: Write>(
        &self,
        mut w: W,
        derived: Option<(&CvSimParams, &PulmResistance)>,
        time_offset: f64,
    ) -> Result<()> {
        let mut header = String::from("t,P_l,P_a,P_v,P_r,P_pa,P_pv");
        if derived.is_some() {
            for n in FLOW_NAMES.iter().chain(["V_l", "V_a", "V_v", "V_r", "V_pa", "V_pv"].iter()) {
                header.push(',');
                header.push_str(n);
            }
        }
        writeln!(w, "{header}")?;
        for (t, s) in self.times.iter().zip(&self.states) {
            let mut line = format!("{t}");
            for v in s {
                line.push_str(&format!(",{v}"));
            }
            if let Some((params, pulm)) = derived {
                let q = compute_flows(params, pulm, &PressureState(*s))?;
                for v in q.as_array() {
                    line.push_str(&format!(",{v}"));
                }
                for v in volumes(params, s, t + time_offset).0 {
                    line.push_str(&format!(",{v}"));
                }
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

/// Pointwise stressed volumes for a trace.
pub fn state_trace_volumes(params: &CvSimParams, trace: &StateTrace) -> Vec<VolumeSet> {
    trace.times.iter().zip(&trace.states).map(|(t, s)| volumes(params, s, *t)).collect()
}

/// Pointwise flows for a trace.
pub fn state_trace_flows(params: &CvSimParams, pulm: &PulmResistance, trace: &StateTrace) -> Result<Vec<FlowSet>> {
    trace.states.iter().map(|s| compute_flows(params, pulm, &PressureState(*s))).collect()
}

/// Integrates the model from `t = 0` and samples it every `sample_dt` over `[0, t_span]`.
pub fn simulate(
    params: &CvSimParams,
    pulm: &PulmResistance,
    initial: &PressureState,
    t_span: f64,
    sample_dt: f64,
    tol: Tolerance,
) -> Result<(StateTrace, SolverStats)> {
    params.validate()?;
    pulm.validate()?;
    if t_span.is_nan() || t_span <= 0.0 || sample_dt.is_nan() || sample_dt <= 0.0 {
        return Err(Error::Input("t_span and sample_dt must be positive".into()));
    }
    let n = (t_span / sample_dt).round() as usize;
    let times: Vec<f64> = (0..=n).map(|i| i as f64 * sample_dt).collect();
    let mut failure = None;
    let f = |t: f64, y: &[f64; 6], mode: u32| match rhs_with_valves(params, pulm, y, &ValveState::from_bits(mode), t) {
        Ok(d) => d,
        Err(e) => {
            failure.get_or_insert(e);
            [f64::NAN; 6]
        }
    };
    let mode_of = |y: &[f64; 6]| ValveState::from_pressures(y).bits();
    // land steps on the waveform seams, where the forcing loses smoothness
    let period = params.period();
    let t_sys = params.r_sys * period;
    let mut grid: Vec<(f64, bool)> = times.iter().map(|&t| (t, true)).collect();
    let cycles = (t_span / period).ceil() as usize;
    for c in 0..=cycles {
        for offset in [0.0, t_sys, 1.5 * t_sys] {
            let ts = c as f64 * period + offset;
            if ts > 0.0 && ts < t_span {
                grid.push((ts, false));
            }
        }
    }
    grid.sort_by(|a, b| a.0.total_cmp(&b.0));
    let grid_times: Vec<f64> = grid.iter().map(|g| g.0).collect();
    let (all, stats) = ode::integrate_switched(f, mode_of, 0.0, initial.0, &grid_times, tol)?;
    let states = all.into_iter().zip(&grid).filter(|(_, g)| g.1).map(|(s, _)| s).collect();
    if let Some(e) = failure {
        return Err(e);
    }
    Ok((StateTrace { times, states }, stats))
}

/// Runs `warmup_cycles` whole periods, then records `record_cycles` periods
/// with the time axis restarted at zero (same cardiac phase).
pub fn simulate_periodic(
    params: &CvSimParams,
    pulm: &PulmResistance,
    initial: &PressureState,
    warmup_cycles: usize,
    record_cycles: usize,
    sample_dt: f64,
    tol: Tolerance,
) -> Result<StateTrace> {
    let period = params.period();
    let t_warm = warmup_cycles as f64 * period;
    let start = if warmup_cycles > 0 {
        let (tr, _) = simulate(params, pulm, initial, t_warm, t_warm, tol)?;
        PressureState(*tr.states.last().expect("non-empty trace"))
    } else {
        *initial
    };
    // warm-up spans whole periods, so restarting the clock keeps the cardiac phase
    let (trace, _) = simulate(params, pulm, &start, record_cycles as f64 * period, sample_dt, tol)?;
    Ok(trace)
}
