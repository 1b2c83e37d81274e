//! Aggregates `summary.json` files below a results directory.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::fs;
use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::error::{CliError, Result};
use crate::experiments::{SCHEMA_VERSION, SUMMARY_FILE};

const KNOWN_SCHEMAS: [&str; 7] = [
    "simulate",
    "harmonic",
    "harmonic_discrepancy",
    "lambda_sweep",
    "ablation",
    "pulmonary_discrepancy",
    "appendix_c",
];

/// Signals listed in the CoV grid, in row order.
const COV_ROWS: [&str; 18] = [
    "P_l", "P_a", "P_v", "P_r", "P_pa", "P_pv", "Q_l_in", "Q_l_out", "Q_a", "Q_r_in", "Q_r_out", "Q_pv", "V_l",
    "V_a", "V_v", "V_r", "V_pa", "V_pv",
];

#[derive(Debug, Clone)]
pub struct RunSummary {
    pub path: PathBuf,
    pub value: Value,
}

impl RunSummary {
    pub fn schema(&self) -> &str {
        self.value["schema"].as_str().unwrap_or("")
    }
}

fn collect(dir: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    let entries = fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    for p in paths {
        if p.is_dir() {
            collect(&p, found)?;
        } else if p.file_name().is_some_and(|n| n == SUMMARY_FILE) {
            found.push(p);
        }
    }
    Ok(())
}

/// Reads every summary below `dir`. Unreadable, unknown or wrong-version
/// files are reported together.
pub fn load(dir: &Path) -> Result<Vec<RunSummary>> {
    if !dir.is_dir() {
        return Err(CliError::Usage(format!("{} is not a directory", dir.display())));
    }
    let mut paths = Vec::new();
    collect(dir, &mut paths)?;
    let mut runs = Vec::new();
    let mut bad = Vec::new();
    for path in paths {
        let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
        let value: Value = match serde_json::from_str(&text) {
            Ok(v) => v,
            Err(e) => {
                bad.push((path, format!("not valid JSON ({e})")));
                continue;
            }
        };
        let schema = value["schema"].as_str().unwrap_or("");
        let version = value["version"].as_u64();
        if !KNOWN_SCHEMAS.contains(&schema) {
            bad.push((path, format!("unknown schema {schema:?}")));
        } else if version != Some(SCHEMA_VERSION as u64) {
            bad.push((path, format!("schema version {version:?}, expected {SCHEMA_VERSION}")));
        } else {
            runs.push(RunSummary { path, value });
        }
    }
    if !bad.is_empty() {
        return Err(CliError::MixedSchemas(bad));
    }
    Ok(runs)
}

fn pct(v: &Value) -> String {
    v.as_f64().map(|x| format!("{:.2}%", 100.0 * x)).unwrap_or_else(|| "-".into())
}

/// Signal-by-scenario CoV grid.
pub fn cov_grid(runs: &[RunSummary]) -> Option<String> {
    let mut cols: BTreeMap<String, &Value> = BTreeMap::new();
    for r in runs.iter().filter(|r| r.schema() == "ablation") {
        let name = r.value["scenario"].as_str().unwrap_or("?").to_string();
        let key = if cols.contains_key(&name) { format!("{name} ({})", r.path.display()) } else { name };
        cols.insert(key, &r.value["cov"]);
    }
    if cols.is_empty() {
        return None;
    }
    let mut s = String::from("| signal |");
    for c in cols.keys() {
        let _ = write!(s, " {c} |");
    }
    s.push_str("\n|---|");
    s.push_str(&"---|".repeat(cols.len()));
    s.push('\n');
    for row in COV_ROWS {
        let _ = write!(s, "| {row} |");
        for v in cols.values() {
            let _ = write!(s, " {} |", pct(&v[row]));
        }
        s.push('\n');
    }
    Some(s)
}

/// Parameter estimates of the ablation runs.
pub fn theta_table(runs: &[RunSummary]) -> Option<String> {
    let mut s = String::from("| run | parameter | mean | std |\n|---|---|---|---|\n");
    let mut any = false;
    for r in runs.iter().filter(|r| r.schema() == "ablation") {
        if let Some(theta) = r.value["theta"].as_object() {
            for (name, v) in theta {
                any = true;
                let _ = writeln!(
                    s,
                    "| {} | {name} | {:.5e} | {:.3e} |",
                    r.value["scenario"].as_str().unwrap_or("?"),
                    v["mean"].as_f64().unwrap_or(f64::NAN),
                    v["std"].as_f64().unwrap_or(f64::NAN)
                );
            }
        }
    }
    any.then_some(s)
}

/// k estimates from harmonic and initialisation-study runs.
pub fn k_table(runs: &[RunSummary]) -> Option<String> {
    let mut rows = Vec::new();
    for r in runs {
        match r.schema() {
            "harmonic" => rows.push((
                r.value["label"].as_str().unwrap_or("harmonic").to_string(),
                r.value["members"].as_u64().unwrap_or(0),
                r.value["k_mean"].as_f64().unwrap_or(f64::NAN),
                r.value["k_std"].as_f64().unwrap_or(f64::NAN),
            )),
            "appendix_c" => {
                for row in r.value["rows"].as_array().into_iter().flatten() {
                    rows.push((
                        row["label"].as_str().unwrap_or("?").to_string(),
                        row["members"].as_u64().unwrap_or(0),
                        row["k_mean"].as_f64().unwrap_or(f64::NAN),
                        row["k_std"].as_f64().unwrap_or(f64::NAN),
                    ));
                }
            }
            _ => {}
        }
    }
    if rows.is_empty() {
        return None;
    }
    let mut s = String::from("| method | members | mean k | std k |\n|---|---|---|---|\n");
    for (l, n, m, sd) in rows {
        let _ = writeln!(s, "| {l} | {n} | {m:.4} | {sd:.4} |");
    }
    Some(s)
}

/// Renders the report, or `None` when the directory holds no results.
pub fn render(runs: &[RunSummary]) -> Option<String> {
    if runs.is_empty() {
        return None;
    }
    let mut out = String::new();
    let sections = [
        ("Coefficient of variation", cov_grid(runs)),
        ("Parameter estimates", theta_table(runs)),
        ("Harmonic k estimates", k_table(runs)),
    ];
    for (title, body) in sections {
        if let Some(b) = body {
            let _ = writeln!(out, "## {title}\n\n{b}");
        }
    }
    let others: Vec<&RunSummary> =
        runs.iter().filter(|r| !matches!(r.schema(), "ablation" | "harmonic" | "appendix_c")).collect();
    if !others.is_empty() {
        let _ = writeln!(out, "## Other runs\n");
        for r in others {
            let _ = writeln!(out, "- {} ({})", r.path.display(), r.schema());
        }
    }
    Some(out)
}
