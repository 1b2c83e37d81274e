//! Acceptance checks, one PASS/FAIL line per criterion.
//!
//! `cargo test -p mcxtfc --release --test acceptance` runs all of them; append
//! criterion numbers after `--` to run a subset.

use std::collections::BTreeSet;
use std::sync::OnceLock;
use std::time::Instant;

use mcxtfc::basis::{Activation, ConstrainedExpression, InitDistribution, RandomBasis, TimeMap};
use mcxtfc::cvsim6::{
    compute_flows, simulate_periodic, state_trace_flows, state_trace_volumes, CvSimParams, PressureState,
    PulmResistance, StateTrace, DEFAULT_WARMUP_CYCLES,
};
use mcxtfc::harmonic::{
    estimate_k, fit_discrepancy, fit_k, oracle_discrepancy, HarmonicConfig, HarmonicDataSpec, Sampling, TruthModel,
};
use mcxtfc::ode::Tolerance;
use mcxtfc::synth::{derive_sigmas, NoiseModel, NoiseRule, ObservationSet, ObservedSeries, ScenarioSpec, UnknownParam};
use mcxtfc::uq::{
    ablation_config, decompose, model_form_config, model_form_scenario, reference_trace, run_cvsim_ensemble,
    run_cvsim_study, CvEnsembleInput, CvStudy, EnsembleSpec, SignalSet, ABLATION_CYCLES, COV_WINDOW_CYCLES,
    MODEL_FORM_CYCLES, TRUTH_SAMPLE_DT,
};
use mcxtfc::xtfc::{
    estimate, forward_solve, DiscrepancySpec, EquationScaling, EstimationProblem, GridSpec, PriorWeights,
    SubdomainContext, XtfcConfig,
};
use mcxtfc::Result;
use nalgebra::DVector;
use proptest::prelude::*;
use proptest::test_runner::{Config as PtConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// criterion 1
const REFERENCE_SIGMAS: [f64; 6] = [2.07, 2.06, 0.14, 0.41, 0.40, 0.24];
const SIGMA_TOL: f64 = 0.05;
// criterion 2
const HARMONIC_REPS: usize = 200;
const K_MEAN_RANGE: (f64, f64) = (0.93, 1.03);
const K_STD_RANGE: (f64, f64) = (0.03, 0.09);
const WIDE_BOUND: f64 = 15.0;
// criterion 3
const CRIME_K_REL: f64 = 1e-6;
const CRIME_PRESSURE_MMHG: f64 = 1e-6;
const CRIME_RPV_REL: f64 = 1e-6;
// criterion 4
const ABLATION_REPS: usize = 100;
const R_PV_TRUE: f64 = 106.66;
const R_PV_REL: f64 = 0.05;
const C_A_TRUE: f64 = 1.2e-3;
const C_A_REL: f64 = 0.10;
const MAX_SECONDS_PER_REP: f64 = 60.0;
// criterion 5
const SCREEN_REPS: usize = 30;
const PA_COV_RANGE: (f64, f64) = (0.01, 0.06);
// criterion 6
const MODEL_FORM_REPS: usize = 20;
const CONFINEMENT_RATIO: f64 = 0.10;
const BIAS_REMOVAL: f64 = 0.80;
// criterion 7
const DELTA_MAX_ERR: f64 = 1e-3;
// criterion 8
const ULPS: f64 = 4.0;
const JAC_REL: f64 = 1e-4;
const VOLUME_DRIFT_PER_CYCLE: f64 = 1e-6;
// criterion 9
const APPENDIX_REPS: usize = 100;
const APPENDIX_MEAN_RANGE: (f64, f64) = (0.9, 1.1);

const SEED: u64 = 2024;

type Criterion = (u32, &'static str, fn() -> Result<Outcome>);

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn from_checks(checks: Vec<(bool, String)>) -> Self {
        let pass = checks.iter().all(|c| c.0);
        let detail = checks
            .into_iter()
            .map(|(ok, s)| format!("[{}] {s}", if ok { "ok" } else { "x" }))
            .collect::<Vec<_>>()
            .join("; ");
        Outcome { pass, detail }
    }
}

fn within(v: f64, range: (f64, f64)) -> bool {
    v >= range.0 && v <= range.1
}

fn ulp_close(a: f64, b: f64) -> bool {
    (a - b).abs() <= ULPS * f64::EPSILON * a.abs().max(b.abs())
}

/// Linear interpolation on a uniformly sampled trace.
fn interp(trace: &StateTrace, state: usize, t: f64) -> f64 {
    let dt = trace.times[1] - trace.times[0];
    let i = (((t - trace.times[0]) / dt).floor().max(0.0) as usize).min(trace.len() - 2);
    let f = (t - trace.times[i]) / dt;
    trace.states[i][state] * (1.0 - f) + trace.states[i + 1][state] * f
}

fn max_abs_diff(a: &StateTrace, b: &StateTrace, state: usize) -> f64 {
    a.states.iter().zip(&b.states).map(|(x, y)| (x[state] - y[state]).abs()).fold(0.0, f64::max)
}

struct AblationTruth {
    params: CvSimParams,
    trace: StateTrace,
    noise: NoiseModel,
}

fn ablation_truth() -> &'static AblationTruth {
    static CELL: OnceLock<AblationTruth> = OnceLock::new();
    CELL.get_or_init(|| {
        let params = CvSimParams::default();
        let trace = reference_trace(&params, &PulmResistance::Linear, ABLATION_CYCLES).expect("reference trace");
        let noise = derive_sigmas(&trace, NoiseRule::default()).expect("noise levels");
        AblationTruth { params, trace, noise }
    })
}

fn ablation_study(index: usize, reps: usize) -> Result<CvStudy> {
    let truth = ablation_truth();
    let scenario = ScenarioSpec::builtin(index)?;
    let config = ablation_config();
    let input = CvEnsembleInput {
        params: &truth.params,
        truth: &truth.trace,
        scenario: &scenario,
        noise: &truth.noise,
        config: &config,
        output_stride: 4,
    };
    run_cvsim_study(&input, &EnsembleSpec { reps, seed: SEED, ..Default::default() }, COV_WINDOW_CYCLES)
}

fn shared_study(index: usize) -> &'static std::result::Result<(CvStudy, f64), String> {
    static SC5: OnceLock<std::result::Result<(CvStudy, f64), String>> = OnceLock::new();
    static SC6: OnceLock<std::result::Result<(CvStudy, f64), String>> = OnceLock::new();
    let cell = if index == 5 { &SC5 } else { &SC6 };
    cell.get_or_init(|| {
        let t = Instant::now();
        let study = ablation_study(index, ABLATION_REPS).map_err(|e| e.to_string())?;
        Ok((study, t.elapsed().as_secs_f64()))
    })
}

fn criterion_1() -> Result<Outcome> {
    let t = Instant::now();
    let params = CvSimParams::default();
    let trace = reference_trace(&params, &PulmResistance::Linear, 1)?;
    let noise = derive_sigmas(&trace, NoiseRule::FractionOfMax { fraction: 0.02 })?;
    let mut checks: Vec<(bool, String)> = noise
        .sigmas
        .iter()
        .zip(REFERENCE_SIGMAS)
        .zip(["P_l", "P_a", "P_v", "P_r", "P_pa", "P_pv"])
        .map(|((s, r), n)| ((s - r).abs() <= SIGMA_TOL, format!("{n} {s:.3} vs {r}")))
        .collect();
    let secs = t.elapsed().as_secs_f64();
    checks.push((secs < 60.0, format!("{secs:.1} s")));
    Ok(Outcome::from_checks(checks))
}

fn criterion_2() -> Result<Outcome> {
    let data = HarmonicDataSpec::default();
    let ens = EnsembleSpec { reps: HARMONIC_REPS, seed: SEED, ..Default::default() };
    let narrow = estimate_k(&data, &HarmonicConfig::default(), &ens)?;
    let wide_cfg = HarmonicConfig { init: InitDistribution::UniformSymmetric { bound: WIDE_BOUND }, ..Default::default() };
    let wide = estimate_k(&data, &wide_cfg, &ens)?;
    Ok(Outcome::from_checks(vec![
        (within(narrow.k_mean, K_MEAN_RANGE), format!("mean k {:.4}", narrow.k_mean)),
        (within(narrow.k_std, K_STD_RANGE), format!("std k {:.4}", narrow.k_std)),
        (wide.k_std > narrow.k_std, format!("std k at B={WIDE_BOUND} {:.4}", wide.k_std)),
    ]))
}

/// Observations of `states` at every point of `trace`, without noise.
fn exact_observations(trace: &StateTrace, states: &[usize]) -> ObservationSet {
    let series = states
        .iter()
        .map(|&s| ObservedSeries {
            variable: mcxtfc::cvsim6::Compartment::from_index(s).expect("compartment"),
            times: trace.times.clone(),
            values: trace.states.iter().map(|x| x[s]).collect(),
        })
        .collect();
    ObservationSet {
        series,
        noise: NoiseModel::zero(),
        seed: 0,
        initial_state: trace.states[0],
        t0: trace.times[0],
        t_end: *trace.times.last().expect("non-empty"),
    }
}

fn criterion_3() -> Result<Outcome> {
    let mut checks = Vec::new();

    let cfg = HarmonicConfig::default();
    let dense = HarmonicDataSpec { span: [0.0, 10.0], n_obs: 401, sampling: Sampling::Uniform, noise_frac: 0.0, ..Default::default() };
    let d = dense.generate(cfg.t_end, SEED, 0)?;
    let mut worst: f64 = 0.0;
    for i in 0..5 {
        let (basis, _) = cfg.bases(SEED, i, 0)?;
        worst = worst.max((fit_k(&d, &cfg, basis)?.k - 1.0).abs());
    }
    checks.push((worst < CRIME_K_REL, format!("harmonic k rel err {worst:.1e}")));

    // data generated by the estimator's own model class and basis
    let params = CvSimParams::default();
    let start = ablation_truth().trace.states[0];
    let config = XtfcConfig { param_prior: PriorWeights::uniform(0.0), ..XtfcConfig::default() };
    let bases = config.build_bases(SEED, 0)?;
    let forward = forward_solve(&params, start, 0.2, &config, &bases)?;

    let obs = exact_observations(&forward.trace, &[0, 1, 2, 3, 4, 5]);
    let none = BTreeSet::new();
    let rec = estimate(&EstimationProblem::from_observations(&params, &obs, &none), &config, &bases)?;
    let err = (0..6).map(|s| max_abs_diff(&rec.trace, &forward.trace, s)).fold(0.0, f64::max);
    checks.push((err < CRIME_PRESSURE_MMHG, format!("pressure max err {err:.1e} mmHg")));

    let obs = exact_observations(&forward.trace, &[1, 4]);
    let unknown = BTreeSet::from([UnknownParam::RPv]);
    let cfg_rpv = XtfcConfig { theta_init_factor: 1.25, ..config.clone() };
    let rec = estimate(&EstimationProblem::from_observations(&params, &obs, &unknown), &cfg_rpv, &bases)?;
    let r = rec.theta(UnknownParam::RPv).expect("r_pv estimated");
    let rel = (r - params.r_pv).abs() / params.r_pv;
    checks.push((rel < CRIME_RPV_REL, format!("Sc5 r_pv rel err {rel:.1e}")));
    Ok(Outcome::from_checks(checks))
}

fn single_replicate_seconds(index: usize) -> Result<f64> {
    let truth = ablation_truth();
    let scenario = ScenarioSpec::builtin(index)?;
    let config = ablation_config();
    let t = Instant::now();
    let obs = mcxtfc::synth::corrupt(&truth.trace, &scenario, &truth.noise, SEED, 0)?;
    let bases = config.build_bases(SEED, 0)?;
    let problem = EstimationProblem::from_observations(&truth.params, &obs, &scenario.unknown_params)
        .trimmed_to(config.grid.h);
    estimate(&problem, &config, &bases)?;
    Ok(t.elapsed().as_secs_f64())
}

fn criterion_4() -> Result<Outcome> {
    let mut checks = Vec::new();
    for (index, param, truth, tol) in [(5, 0, R_PV_TRUE, R_PV_REL), (6, 1, C_A_TRUE, C_A_REL)] {
        let (study, _) = match shared_study(index) {
            Ok(s) => s,
            Err(e) => return Ok(Outcome { pass: false, detail: format!("Sc{index}: {e}") }),
        };
        let (mean, std) = study.theta[param];
        let rel = (mean - truth).abs() / truth;
        let name = if param == 0 { "r_pv" } else { "c_a" };
        checks.push((rel <= tol, format!("Sc{index} {name} {mean:.4e} +- {std:.2e} (rel {:.1}%)", 100.0 * rel)));
        let secs = single_replicate_seconds(index)?;
        checks.push((secs < MAX_SECONDS_PER_REP, format!("Sc{index} {secs:.1} s/replicate")));
    }
    Ok(Outcome::from_checks(checks))
}

fn criterion_5() -> Result<Outcome> {
    let mut checks = Vec::new();
    let mut studies = Vec::new();
    for index in 1..=4 {
        studies.push((index, ablation_study(index, SCREEN_REPS)?));
    }
    for index in [5, 6] {
        match shared_study(index) {
            Ok((s, _)) => studies.push((index, s.clone())),
            Err(e) => return Ok(Outcome { pass: false, detail: format!("Sc{index}: {e}") }),
        }
    }
    let cov = |s: &CvStudy, n: &str| s.cov_of(n).unwrap_or(f64::NAN);
    for (index, s) in &studies {
        let pa = cov(s, "P_a");
        if *index <= 5 {
            checks.push((within(pa, PA_COV_RANGE), format!("Sc{index} P_a {:.2}%", 100.0 * pa)));
        }
        let (rout, qa) = (cov(s, "Q_r_out"), cov(s, "Q_a"));
        checks.push((rout > qa, format!("Sc{index} Q_r_out {:.2}% > Q_a {:.2}%", 100.0 * rout, 100.0 * qa)));
    }
    let pl5 = cov(&studies[4].1, "P_l");
    let pl6 = cov(&studies[5].1, "P_l");
    checks.push((pl6 > pl5, format!("P_l Sc6 {:.2}% > Sc5 {:.2}%", 100.0 * pl6, 100.0 * pl5)));
    Ok(Outcome::from_checks(checks))
}

fn criterion_6() -> Result<Outcome> {
    let params = CvSimParams::default();
    let nonlinear = PulmResistance::default_nonlinear();
    let truth = reference_trace(&params, &nonlinear, MODEL_FORM_CYCLES)?;
    let linear = reference_trace(&params, &PulmResistance::Linear, MODEL_FORM_CYCLES)?;
    let (d_pa, d_ppa) = (max_abs_diff(&truth, &linear, 1), max_abs_diff(&truth, &linear, 4));
    let mut checks = vec![(
        d_pa < CONFINEMENT_RATIO * d_ppa,
        format!("truth diff P_a {d_pa:.3} vs P_pa {d_ppa:.3} (ratio {:.2})", d_pa / d_ppa),
    )];

    let noise = derive_sigmas(&truth, NoiseRule::default())?;
    let scenario = model_form_scenario();
    let ens = EnsembleSpec { reps: MODEL_FORM_REPS, seed: SEED, ..Default::default() };
    let mut runs = Vec::new();
    for disc in [DiscrepancySpec::None, DiscrepancySpec::Algebraic { neurons: 10 }, DiscrepancySpec::inductive_default(10)] {
        let config = model_form_config(disc);
        let input = CvEnsembleInput {
            params: &params,
            truth: &truth,
            scenario: &scenario,
            noise: &noise,
            config: &config,
            output_stride: 1,
        };
        let study = run_cvsim_study(&input, &ens, COV_WINDOW_CYCLES)?;
        let b = &study.bands;
        let (ppa, qpv) = (b.index_of("P_pa").expect("P_pa"), b.index_of("Q_pv").expect("Q_pv"));
        let n = b.times.len();
        let bias = (0..n).map(|i| (b.mean[ppa][i] - interp(&truth, 4, b.times[i])).abs()).sum::<f64>() / n as f64;
        let all: Vec<usize> = (0..n).collect();
        runs.push((bias, b.mean_band_width(qpv, &all)));
    }
    let removal = 1.0 - runs[1].0 / runs[0].0;
    checks.push((
        removal >= BIAS_REMOVAL,
        format!("P_pa bias {:.3} -> {:.3} ({:.0}% removed)", runs[0].0, runs[1].0, 100.0 * removal),
    ));
    checks.push((runs[2].1 < runs[1].1, format!("Q_pv band inductive {:.2} < algebraic {:.2}", runs[2].1, runs[1].1)));
    Ok(Outcome::from_checks(checks))
}

fn criterion_7() -> Result<Outcome> {
    let cfg = HarmonicConfig::dense_discrepancy();
    let spec = HarmonicDataSpec {
        model: TruthModel::Nonlinear,
        span: [0.0, 10.0],
        n_obs: 1001,
        sampling: Sampling::Uniform,
        noise_frac: 0.0,
        ..Default::default()
    };
    let d = spec.generate(cfg.t_end, SEED, 0)?;
    let mut checks = Vec::new();
    for i in 0..3 {
        let (basis, disc) = cfg.bases(SEED, i, cfg.neurons)?;
        let f = fit_discrepancy(&d, &cfg, 1.0, basis, disc)?;
        let err = (0..=2000)
            .map(|j| {
                let t = 0.005 * j as f64;
                (f.delta(t) - oracle_discrepancy(1.0, 10.0, t)).abs()
            })
            .fold(0.0, f64::max);
        checks.push((err < DELTA_MAX_ERR, format!("basis {i} max err {err:.1e}")));
    }
    Ok(Outcome::from_checks(checks))
}

fn prop(name: &str, cases: u32, run: impl FnOnce(&mut TestRunner) -> std::result::Result<(), String>) -> (bool, String) {
    let mut runner = TestRunner::new(PtConfig { cases, failure_persistence: None, ..PtConfig::default() });
    match run(&mut runner) {
        Ok(()) => (true, format!("{name} ({cases} cases)")),
        Err(e) => (false, format!("{name}: {e}")),
    }
}

fn criterion_8() -> Result<Outcome> {
    let mut checks = Vec::new();

    checks.push(prop("initial value exact", 512, |r| {
        let strat = (1usize..40, any::<u64>(), -1e4f64..1e4, -2.0f64..2.0, 0.01f64..5.0, -50.0f64..50.0);
        r.run(&strat, |(n, seed, x0, t0, len, scale)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let basis = RandomBasis::build_with_rng(n, Activation::Tanh, &InitDistribution::default(), &mut rng).unwrap();
            let beta: Vec<f64> = (0..n).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
            let ce = ConstrainedExpression::new(basis, TimeMap::new(t0, t0 + len).unwrap(), beta, x0).unwrap();
            prop_assert!(ulp_close(ce.value(t0), x0) || ce.value(t0) == x0, "{} vs {x0}", ce.value(t0));
            Ok(())
        })
        .map_err(|e| e.to_string())
    }));

    checks.push(prop("analytic vs finite-difference Jacobian", 64, |r| {
        let strat = (0usize..4, any::<u64>(), 0.0f64..1.6);
        r.run(&strat, |(variant, seed, t_start)| {
            prop_assert!(jacobian_matches(variant, seed, t_start), "variant {variant} seed {seed} t {t_start}");
            Ok(())
        })
        .map_err(|e| e.to_string())
    }));

    checks.push(prop("total^2 = epistemic^2 + aleatoric^2", 256, |r| {
        let strat = (
            proptest::collection::vec(proptest::collection::vec(-1e3f64..1e3, 5), 2..20),
            0.0f64..50.0,
        );
        r.run(&strat, |(rows, alea)| {
            let members: Vec<SignalSet> = rows
                .iter()
                .map(|v| SignalSet {
                    names: vec!["s".into()],
                    units: vec![String::new()],
                    times: (0..5).map(|i| i as f64).collect(),
                    values: vec![v.clone()],
                })
                .collect();
            let b = decompose(&members, &[alea], &[]).unwrap();
            for (tot, epi) in b.total[0].iter().zip(&b.epistemic[0]) {
                let rhs = epi * epi + alea * alea;
                prop_assert!(ulp_close(tot * tot, rhs), "{} vs {rhs}", tot * tot);
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
    }));

    let params = CvSimParams::default();
    let cycles = 5;
    let trace = simulate_periodic(
        &params,
        &PulmResistance::Linear,
        &PressureState::default_initial(),
        DEFAULT_WARMUP_CYCLES,
        cycles,
        TRUTH_SAMPLE_DT,
        Tolerance::default(),
    )?;
    let v0 = [params.v0_l, params.v0_a, params.v0_v, params.v0_r, params.v0_pa, params.v0_pv];
    let vols: Vec<f64> = state_trace_volumes(&params, &trace)
        .iter()
        .map(|v| v.0.iter().zip(v0).map(|(a, b)| a - b).sum())
        .collect();
    let drift = vols.iter().map(|v| (v - vols[0]).abs()).fold(0.0, f64::max) / vols[0].abs() / cycles as f64;
    checks.push((drift < VOLUME_DRIFT_PER_CYCLE, format!("stressed volume drift {drift:.1e}/cycle")));

    let flows = state_trace_flows(&params, &PulmResistance::Linear, &trace)?;
    let valves_ok = flows.iter().all(|q| q.q_l_in >= 0.0 && q.q_l_out >= 0.0 && q.q_r_in >= 0.0 && q.q_r_out >= 0.0);
    checks.push((valves_ok, "valve flows >= 0 along the trajectory".into()));
    checks.push(prop("valve flows >= 0 for any pressures", 1024, |r| {
        r.run(&proptest::array::uniform6(-50.0f64..200.0), |p| {
            let q = compute_flows(&params, &PulmResistance::Linear, &PressureState(p)).unwrap();
            prop_assert!(q.q_l_in >= 0.0 && q.q_l_out >= 0.0 && q.q_r_in >= 0.0 && q.q_r_out >= 0.0);
            Ok(())
        })
        .map_err(|e| e.to_string())
    }));

    checks.push(determinism()?);
    Ok(Outcome::from_checks(checks))
}

fn jacobian_matches(variant: usize, seed: u64, t_start: f64) -> bool {
    let (unknowns, disc, scaling) = match variant {
        0 => (vec![UnknownParam::RPv], DiscrepancySpec::None, EquationScaling::Physical),
        1 => (vec![UnknownParam::RPv, UnknownParam::CA], DiscrepancySpec::None, EquationScaling::ActivationDomain),
        2 => (vec![], DiscrepancySpec::Algebraic { neurons: 3 }, EquationScaling::Physical),
        _ => (vec![UnknownParam::CA], DiscrepancySpec::inductive_default(3), EquationScaling::TimeScale(0.02)),
    };
    let params = CvSimParams::default();
    let config = XtfcConfig {
        grid: GridSpec { h: 0.01, points: 6, neurons: 4 },
        discrepancy: disc,
        equation_scaling: scaling,
        param_prior: PriorWeights::uniform(0.3),
        ..XtfcConfig::default()
    };
    let bases = config.build_bases(seed, 0).unwrap();
    let ctx = SubdomainContext::new(&config, &bases, &unknowns).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x0: [f64; 6] = std::array::from_fn(|_| rng.random_range(0.0..100.0));
    let log_prev: Vec<f64> = unknowns.iter().map(|p| nominal(&params, *p).ln()).collect();
    let obs = [
        (mcxtfc::cvsim6::Compartment::A, t_start + 0.003, 95.0),
        (mcxtfc::cvsim6::Compartment::Pa, t_start + 0.007, 18.0),
    ];
    let sub = ctx.problem(&params, &config, t_start, x0, 1.0, log_prev, &obs);
    let lay = ctx.layout();
    let mut u = DVector::from_fn(lay.len(), |_, _| rng.random_range(-3.0..3.0));
    for (j, p) in lay.params.iter().enumerate() {
        u[lay.param(j)] = (nominal(&params, *p) * rng.random_range(0.7..1.3)).ln();
    }
    let valves = sub.valves(&u);
    let (r, jac) = sub.residuals_and_jacobian(&u);
    for col in 0..lay.len() {
        let h = 1e-6 * u[col].abs().max(1.0);
        let (mut up, mut um) = (u.clone(), u.clone());
        up[col] += h;
        um[col] -= h;
        let fd = (sub.residuals_frozen(&up, &valves) - sub.residuals_frozen(&um, &valves)) / (2.0 * h);
        for row in 0..r.len() {
            let a = jac[(row, col)];
            // absolute floor for entries that cancel to roundoff within the row
            let floor = 1e-7 * jac.row(row).amax() + 1e-9;
            if (a - fd[row]).abs() > JAC_REL * a.abs().max(fd[row].abs()) + floor {
                return false;
            }
        }
    }
    true
}

fn nominal(params: &CvSimParams, p: UnknownParam) -> f64 {
    match p {
        UnknownParam::RPv => params.r_pv,
        UnknownParam::CA => params.c_a,
    }
}

fn determinism() -> Result<(bool, String)> {
    let truth = ablation_truth();
    let scenario = ScenarioSpec::builtin(5)?;
    let config = ablation_config();
    let short = truth.trace.window(truth.trace.times[0], truth.trace.times[0] + 0.05);
    let input = CvEnsembleInput {
        params: &truth.params,
        truth: &short,
        scenario: &scenario,
        noise: &truth.noise,
        config: &config,
        output_stride: 1,
    };
    let spec = EnsembleSpec { reps: 4, seed: 99, ..Default::default() };
    let bits = |e: &mcxtfc::uq::Ensemble<mcxtfc::uq::CvReplicate>| -> Vec<u64> {
        e.members
            .iter()
            .flat_map(|m| m.signals.values.iter().flatten().chain(&m.theta_hat).map(|v| v.to_bits()).collect::<Vec<_>>())
            .collect()
    };
    let a = bits(&run_cvsim_ensemble(&input, &spec)?);
    let b = bits(&run_cvsim_ensemble(&input, &spec)?);
    let data = HarmonicDataSpec::default();
    let hspec = EnsembleSpec { reps: 8, seed: 99, ..Default::default() };
    let h1 = estimate_k(&data, &HarmonicConfig::default(), &hspec)?;
    let h2 = estimate_k(&data, &HarmonicConfig::default(), &hspec)?;
    let hk = |e: &mcxtfc::harmonic::HarmonicEnsemble| e.k_values.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    Ok((!a.is_empty() && a == b && hk(&h1) == hk(&h2), "bitwise repeatable ensembles".into()))
}

fn criterion_9() -> Result<Outcome> {
    let data = HarmonicDataSpec::default();
    let ens = EnsembleSpec { reps: APPENDIX_REPS, seed: SEED, ..Default::default() };
    let run = |init: InitDistribution| estimate_k(&data, &HarmonicConfig { init, ..Default::default() }, &ens);
    let mut checks = Vec::new();
    for (label, init) in [
        ("U(-1,0)", InitDistribution::UniformRange { lo: -1.0, hi: 0.0 }),
        ("N(0,1)", InitDistribution::Normal { mean: 0.0, std: 1.0 }),
        ("Exp(2)", InitDistribution::Exponential { mean: 2.0 }),
    ] {
        let e = run(init)?;
        checks.push((within(e.k_mean, APPENDIX_MEAN_RANGE), format!("{label} mean k {:.4} +- {:.4}", e.k_mean, e.k_std)));
    }
    let n1 = run(InitDistribution::Normal { mean: 0.0, std: 1.0 })?;
    let n10 = run(InitDistribution::Normal { mean: 0.0, std: 10.0 })?;
    checks.push((n10.k_std > n1.k_std, format!("std k N(0,10) {:.4} > N(0,1) {:.4}", n10.k_std, n1.k_std)));
    Ok(Outcome::from_checks(checks))
}

fn main() {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [Criterion; 9] = [
        (1, "noise levels", criterion_1),
        (2, "harmonic inverse", criterion_2),
        (3, "inverse-crime exactness", criterion_3),
        (4, "ablation parameter recovery", criterion_4),
        (5, "CoV structure", criterion_5),
        (6, "pulmonary model form", criterion_6),
        (7, "exact discrepancy", criterion_7),
        (8, "invariants", criterion_8),
        (9, "initialisation robustness", criterion_9),
    ];
    let mut failed = Vec::new();
    for (n, name, f) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let t = Instant::now();
        let out = f().unwrap_or_else(|e| Outcome { pass: false, detail: format!("error: {e}") });
        println!(
            "criterion {n} ({name}): {} [{:.1} s] {}",
            if out.pass { "PASS" } else { "FAIL" },
            t.elapsed().as_secs_f64(),
            out.detail
        );
        if !out.pass {
            failed.push(n);
        }
    }
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
