//! Experiment execution and artifact writing.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use mcxtfc::cvsim6::{simulate_periodic, Compartment, CvSimParams, PressureState, PulmResistance, StateTrace};
use mcxtfc::harmonic::{
    estimate_k, lambda_sweep, learn_harmonic_discrepancy, HarmonicConfig, HarmonicDataSpec, HarmonicEnsemble,
};
use mcxtfc::ode::Tolerance;
use mcxtfc::synth::{derive_sigmas, NoiseRule, ScenarioSpec};
use mcxtfc::uq::{
    correlation_snapshot, mean_std, model_form_scenario, quantile, reference_trace, run_cvsim_study, write_cov_csv,
    CvEnsembleInput, CvStudy, EnsembleSpec, UncertaintyBands, COV_WINDOW_CYCLES, MODEL_FORM_SAMPLE_RATE,
};
use mcxtfc::xtfc::XtfcConfig;
use mcxtfc::cvsim6::DEFAULT_WARMUP_CYCLES;
use serde_json::{json, Value};

use crate::config::{init_label, Experiment, RunConfig};
use crate::error::{CliError, Result};
use crate::plot::{line_band_svg, Series};

/// Version tag written into every `summary.json`.
pub const SCHEMA_VERSION: u32 = 1;

pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.toml";

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> mcxtfc::Result<()>) -> Result<()> {
    let mut w = create(path)?;
    f(&mut w)?;
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Runs `config`, writing artifacts to `out`, and returns the summary.
pub fn run(config: &RunConfig, out: &Path) -> Result<Value> {
    config.validate()?;
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    write_text(&out.join(CONFIG_FILE), &config.to_toml()?)?;
    let body = match &config.experiment {
        Experiment::SimulateCvsim { cycles, sample_dt, pulmonary } => {
            simulate(&config.params, pulmonary, *cycles, *sample_dt, out)?
        }
        Experiment::Harmonic { data, model } => {
            let e = estimate_k(data, model, &config.ensemble)?;
            harmonic_artifacts(&e, data, model, out)?;
            json!({
                "label": format!("MC X-TFC {}", init_label(&model.init)),
                "k_mean": e.k_mean,
                "k_std": e.k_std,
                "members": e.k_values.len(),
                "failures": e.failures.len(),
                "data_rms": e.data_rms,
            })
        }
        Experiment::HarmonicDiscrepancy { data, model, setup } => {
            let e = learn_harmonic_discrepancy(data, setup, model, &config.ensemble)?;
            harmonic_artifacts(&e, data, model, out)?;
            let delta_bw = e.bands.index_of("delta").map(|_| e.unobserved_band_width("delta", data));
            json!({
                "members": e.k_values.len(),
                "failures": e.failures.len(),
                "data_rms": e.data_rms,
                "x_band_width": e.unobserved_band_width("x", data),
                "delta_band_width": delta_bw,
            })
        }
        Experiment::LambdaSweep { data, model, lambdas } => {
            let sweep = lambda_sweep(data, lambdas, model, &config.ensemble)?;
            write_with(&out.join("sweep.csv"), |w| {
                writeln!(w, "lambda_eq,gap_error,gap_band_width,k_mean,k_std")?;
                for s in &sweep {
                    writeln!(
                        w,
                        "{},{},{},{},{}",
                        s.lambda_eq, s.gap_error, s.gap_band_width, s.result.k_mean, s.result.k_std
                    )?;
                }
                Ok(())
            })?;
            for s in &sweep {
                let dir = out.join(format!("lambda_{}", s.lambda_eq));
                fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
                harmonic_artifacts(&s.result, data, model, &dir)?;
            }
            json!({
                "entries": sweep.iter().map(|s| json!({
                    "lambda_eq": s.lambda_eq,
                    "gap_error": s.gap_error,
                    "gap_band_width": s.gap_band_width,
                    "k_mean": s.result.k_mean,
                    "k_std": s.result.k_std,
                })).collect::<Vec<_>>(),
            })
        }
        Experiment::Ablation { scenario, cycles, estimator } => {
            let scen = ScenarioSpec::from_name(scenario)?;
            let truth = reference_trace(&config.params, &PulmResistance::Linear, *cycles)?;
            let study = cv_study(&config.params, &truth, &scen, estimator, &config.ensemble)?;
            let names = unknown_names(&scen);
            cv_artifacts(&study, &names, &truth, estimator, out)?;
            let mut v = cv_summary(&study, &names);
            v["scenario"] = json!(scen.name);
            v
        }
        Experiment::PulmonaryDiscrepancy { variant, neurons, cycles, estimator } => {
            let truth = reference_trace(&config.params, &PulmResistance::default_nonlinear(), *cycles)?;
            let cfg = XtfcConfig { discrepancy: variant.discrepancy(*neurons), ..estimator.clone() };
            let scen = model_form_scenario();
            let study = cv_study(&config.params, &truth, &scen, &cfg, &config.ensemble)?;
            cv_artifacts(&study, &[], &truth, &cfg, out)?;
            let b = &study.bands;
            let ppa = b.index_of("P_pa").expect("pressure signal");
            let qpv = b.index_of("Q_pv").expect("flow signal");
            let n = b.times.len();
            let bias = (0..n).map(|i| (b.mean[ppa][i] - interp(&truth, 4, b.times[i])).abs()).sum::<f64>() / n as f64;
            let all: Vec<usize> = (0..n).collect();
            let mut v = cv_summary(&study, &[]);
            v["variant"] = json!(variant.name());
            v["sample_rate_hz"] = json!(MODEL_FORM_SAMPLE_RATE);
            v["p_pa_mean_abs_bias_mmhg"] = json!(bias);
            v["q_pv_band_width_ml_s"] = json!(b.mean_band_width(qpv, &all));
            v
        }
        Experiment::AppendixCAblation { data, model, inits, activations, ensemble_sizes } => {
            appendix_c(data, model, inits, activations, ensemble_sizes, &config.ensemble, out)?
        }
    };
    let mut summary = json!({
        "schema": schema_name(&config.experiment),
        "version": SCHEMA_VERSION,
        "experiment": config.experiment.label(),
        "reps": if config.experiment.uses_ensemble() { Some(config.ensemble.reps) } else { None },
        "seed": config.ensemble.seed,
    });
    if let (Value::Object(s), Value::Object(b)) = (&mut summary, body) {
        s.extend(b);
    }
    let text = serde_json::to_string_pretty(&summary).expect("summary serialises");
    write_text(&out.join(SUMMARY_FILE), &(text + "\n"))?;
    Ok(summary)
}

pub fn schema_name(e: &Experiment) -> &'static str {
    match e {
        Experiment::SimulateCvsim { .. } => "simulate",
        Experiment::Harmonic { .. } => "harmonic",
        Experiment::HarmonicDiscrepancy { .. } => "harmonic_discrepancy",
        Experiment::LambdaSweep { .. } => "lambda_sweep",
        Experiment::Ablation { .. } => "ablation",
        Experiment::PulmonaryDiscrepancy { .. } => "pulmonary_discrepancy",
        Experiment::AppendixCAblation { .. } => "appendix_c",
    }
}

fn interp(trace: &StateTrace, state: usize, t: f64) -> f64 {
    let dt = trace.times[1] - trace.times[0];
    let i = (((t - trace.times[0]) / dt).floor().max(0.0) as usize).min(trace.len() - 2);
    let f = (t - trace.times[i]) / dt;
    trace.states[i][state] * (1.0 - f) + trace.states[i + 1][state] * f
}

fn simulate(params: &CvSimParams, pulm: &PulmResistance, cycles: usize, dt: f64, out: &Path) -> Result<Value> {
    let trace = simulate_periodic(
        params,
        pulm,
        &PressureState::default_initial(),
        DEFAULT_WARMUP_CYCLES,
        cycles,
        dt,
        Tolerance::default(),
    )?;
    write_with(&out.join("trace.csv"), |w| trace.write_csv(w, Some((params, pulm)), 0.0))?;
    let plots = out.join("plots");
    fs::create_dir_all(&plots).map_err(|e| CliError::io(&plots, e))?;
    for c in Compartment::ALL {
        let col = trace.column(c);
        let svg = line_band_svg(
            c.pressure_name(),
            "t [s]",
            &format!("{} [mmHg]", c.pressure_name()),
            &Series { times: &trace.times, mean: &col, band: None, reference: None },
        );
        write_text(&plots.join(format!("{}.svg", c.pressure_name())), &svg)?;
    }
    let noise = derive_sigmas(&trace, NoiseRule::default())?;
    let sigmas: serde_json::Map<String, Value> =
        Compartment::ALL.iter().map(|c| (c.pressure_name().to_string(), json!(noise.sigma(*c)))).collect();
    Ok(json!({ "cycles": cycles, "samples": trace.len(), "noise_sigma_mmhg": sigmas }))
}

fn plot_bands(bands: &UncertaintyBands, dir: &Path, reference: impl Fn(&str) -> Option<Vec<f64>>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    for (s, name) in bands.names.iter().enumerate() {
        let r = reference(name);
        let svg = line_band_svg(
            &format!("{name}: mean and 5-95% band ({} members)", bands.members),
            "t [s]",
            &format!("{name} [{}]", bands.units[s]),
            &Series {
                times: &bands.times,
                mean: &bands.mean[s],
                band: Some((&bands.q05[s], &bands.q95[s])),
                reference: r.as_deref(),
            },
        );
        write_text(&dir.join(format!("{name}.svg")), &svg)?;
    }
    Ok(())
}

fn harmonic_artifacts(e: &HarmonicEnsemble, data: &HarmonicDataSpec, model: &HarmonicConfig, out: &Path) -> Result<()> {
    write_with(&out.join("bands.csv"), |w| e.bands.write_csv(w))?;
    write_with(&out.join("k_values.csv"), |w| {
        writeln!(w, "replicate,k")?;
        for (i, k) in e.k_values.iter().enumerate() {
            writeln!(w, "{i},{k}")?;
        }
        Ok(())
    })?;
    let truth: Vec<f64> = e.bands.times.iter().map(|&t| data.model.eval(data.k, model.x0, t)).collect();
    plot_bands(&e.bands, &out.join("plots"), |n| (n == "x").then(|| truth.clone()))
}

fn cv_study(
    params: &CvSimParams,
    truth: &StateTrace,
    scenario: &ScenarioSpec,
    config: &XtfcConfig,
    ensemble: &EnsembleSpec,
) -> Result<CvStudy> {
    let noise = derive_sigmas(truth, scenario.noise)?;
    // about one output point per millisecond
    let per_ms = ((config.grid.points - 1) as f64 * 1e-3 / config.grid.h).round().max(1.0) as usize;
    let input = CvEnsembleInput { params, truth, scenario, noise: &noise, config, output_stride: per_ms };
    Ok(run_cvsim_study(&input, ensemble, COV_WINDOW_CYCLES.min(truth_cycles(params, truth)))?)
}

fn truth_cycles(params: &CvSimParams, truth: &StateTrace) -> f64 {
    let span = truth.times.last().copied().unwrap_or(0.0) - truth.times.first().copied().unwrap_or(0.0);
    span / params.period()
}

fn cv_artifacts(
    study: &CvStudy,
    names: &[&'static str],
    truth: &StateTrace,
    config: &XtfcConfig,
    out: &Path,
) -> Result<()> {
    let b = &study.bands;
    write_with(&out.join("bands.csv"), |w| b.write_csv(w))?;
    write_with(&out.join("cov.csv"), |w| write_cov_csv(&study.cov, w))?;

    let members = study.ensemble.signal_sets();
    if members.len() >= 3 {
        let pressures: Vec<usize> = (0..6).collect();
        let t_mid = b.times[b.times.len() / 2];
        let snap = correlation_snapshot(&members, &pressures, t_mid)?;
        write_with(&out.join("correlation.csv"), |w| snap.write_csv(w))?;
    }

    let theta = theta_series(study, names, config.grid.h, b.times.first().copied().unwrap_or(0.0));
    if !theta.is_empty() {
        write_with(&out.join("theta.csv"), |w| {
            let names: Vec<&str> = theta.iter().map(|s| s.0).collect();
            let mut header = String::from("t[s]");
            for n in &names {
                header.push_str(&format!(",{n}_mean,{n}_q05,{n}_q95"));
            }
            writeln!(w, "{header}")?;
            let n_sub = theta.first().map(|s| s.1.len()).unwrap_or(0);
            for i in 0..n_sub {
                let mut line = format!("{}", theta[0].1[i]);
                for s in &theta {
                    line.push_str(&format!(",{},{},{}", s.2[i], s.3[i], s.4[i]));
                }
                writeln!(w, "{line}")?;
            }
            Ok(())
        })?;
    }

    let plots = out.join("plots");
    let truth_for = |name: &str| -> Option<Vec<f64>> {
        let c = Compartment::from_pressure_name(name)?;
        Some(b.times.iter().map(|&t| interp(truth, c.index(), t)).collect())
    };
    plot_bands(b, &plots, truth_for)?;
    for (name, times, mean, q05, q95) in &theta {
        let svg = line_band_svg(
            &format!("{name} per subdomain"),
            "t [s]",
            &format!("{name} [{}]", param_unit(name)),
            &Series { times, mean, band: Some((q05, q95)), reference: None },
        );
        write_text(&plots.join(format!("theta_{name}.svg")), &svg)?;
    }
    Ok(())
}

fn param_unit(name: &str) -> &'static str {
    if name == "c_a" {
        "mL/Barye"
    } else {
        "Barye s/mL"
    }
}

type ThetaSeries = (&'static str, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>);

/// Per-subdomain ensemble mean and 5-95% quantiles of each unknown parameter.
fn theta_series(study: &CvStudy, names: &[&'static str], h: f64, t0: f64) -> Vec<ThetaSeries> {
    let Some(first) = study.ensemble.members.first() else { return Vec::new() };
    (0..first.theta_points.len())
        .map(|j| {
            let n = first.theta_points[j].len();
            let (mut mean, mut q05, mut q95) = (Vec::new(), Vec::new(), Vec::new());
            for i in 0..n {
                let v: Vec<f64> = study.ensemble.members.iter().map(|m| m.theta_points[j][i]).collect();
                mean.push(mean_std(&v).0);
                q05.push(quantile(&v, 0.05));
                q95.push(quantile(&v, 0.95));
            }
            let times = (0..n).map(|i| t0 + h * i as f64).collect();
            (names[j], times, mean, q05, q95)
        })
        .collect()
}

fn unknown_names(scenario: &ScenarioSpec) -> Vec<&'static str> {
    scenario.unknown_params.iter().map(|p| p.name()).collect()
}

fn cv_summary(study: &CvStudy, names: &[&'static str]) -> Value {
    let theta: serde_json::Map<String, Value> = names
        .iter()
        .zip(&study.theta)
        .map(|(n, (m, s))| (n.to_string(), json!({ "mean": m, "std": s, "unit": param_unit(n) })))
        .collect();
    let cov: serde_json::Map<String, Value> =
        study.cov.iter().map(|c| (c.name.clone(), json!(c.cov))).collect();
    json!({
        "members": study.ensemble.members.len(),
        "failures": study.ensemble.failures.len(),
        "theta": theta,
        "cov": cov,
    })
}

fn appendix_c(
    data: &HarmonicDataSpec,
    model: &HarmonicConfig,
    inits: &[mcxtfc::basis::InitDistribution],
    activations: &[mcxtfc::basis::Activation],
    sizes: &[usize],
    ensemble: &EnsembleSpec,
    out: &Path,
) -> Result<Value> {
    let mut rows: Vec<(String, usize, f64, f64)> = Vec::new();
    for init in inits {
        let e = estimate_k(data, &HarmonicConfig { init: *init, ..*model }, ensemble)?;
        rows.push((format!("init {}", init_label(init)), e.k_values.len(), e.k_mean, e.k_std));
    }
    for act in activations {
        let e = estimate_k(data, &HarmonicConfig { activation: *act, ..*model }, ensemble)?;
        rows.push((format!("activation {act:?}"), e.k_values.len(), e.k_mean, e.k_std));
    }
    for &reps in sizes {
        let e = estimate_k(data, model, &EnsembleSpec { reps, ..*ensemble })?;
        rows.push((format!("ensemble size {reps}"), e.k_values.len(), e.k_mean, e.k_std));
    }
    write_with(&out.join("appendix_c.csv"), |w| {
        writeln!(w, "setting,members,k_mean,k_std")?;
        for (l, n, m, s) in &rows {
            writeln!(w, "{l},{n},{m},{s}")?;
        }
        Ok(())
    })?;
    Ok(json!({
        "rows": rows.iter().map(|(l, n, m, s)| json!({ "label": l, "members": n, "k_mean": m, "k_std": s })).collect::<Vec<_>>(),
    }))
}

/// Default output directory for a run.
pub fn default_out(root: &Path, experiment: &Experiment) -> PathBuf {
    root.join(experiment.label())
}
