//! Mode dispatch, CSV emission and the run manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use log::info;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::comparison::{run_comparison, ComparisonScenario};
use crate::error::{Error, Result};
use crate::linear::{q_special_solve, solve_linear, Component, LinearOptions, SystemForm};
use crate::model::{AffineDriver, Driver, LinearDriver, MixedDriver, SolutionGrid, TimeDriver, ZeroDriver};
use crate::paths::{build_grid, simulate_ensemble, PathEnsemble};
use crate::picard::{picard_full_freeze, picard_mean_freeze, PicardReport, Scheme};
use crate::scenario::config::{DriverSpec, Mode, ScenarioConfig};
use crate::stats;
use crate::utility::{adjoint_state, evaluate_j, optimality_scan};

pub const MANIFEST_NAME: &str = "manifest.json";

/// How a completed run ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunStatus {
    Success,
    NonConvergence,
    HypothesisFailure,
}

impl RunStatus {
    pub fn exit_code(self) -> i32 {
        match self {
            RunStatus::Success => 0,
            RunStatus::NonConvergence => 3,
            RunStatus::HypothesisFailure => 4,
        }
    }

    fn name(self) -> &'static str {
        match self {
            RunStatus::Success => "success",
            RunStatus::NonConvergence => "non_convergence",
            RunStatus::HypothesisFailure => "hypothesis_failure",
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub status: RunStatus,
    pub run_id: String,
    pub files: Vec<PathBuf>,
    pub manifest: PathBuf,
    /// Short human-readable summary lines.
    pub summary: Vec<String>,
}

/// Exit status for an error raised before or during a run.
pub fn error_exit_code(e: &Error) -> i32 {
    match e.root() {
        Error::Config(_) | Error::Domain(_) => 2,
        Error::NonConvergence { .. } => 3,
        Error::Admission(_) => 4,
        _ => 1,
    }
}

/// Identifier of a run: SHA-256 of the scenario text and the effective
/// seed and path count.
pub fn run_id(text: &str, cfg: &ScenarioConfig) -> String {
    let mut h = Sha256::new();
    h.update(text.as_bytes());
    h.update(format!("\nseed={}\nn_paths={}\nversion={}\n", cfg.seed, cfg.n_paths, env!("CARGO_PKG_VERSION")).as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Builds the driver named by a spec.
pub fn build_driver(spec: &DriverSpec, cfg: &ScenarioConfig) -> Result<Arc<dyn Driver>> {
    let grid = build_grid(cfg.horizon, cfg.steps)?;
    Ok(match spec {
        DriverSpec::Zero => Arc::new(ZeroDriver),
        DriverSpec::Time { gamma } => Arc::new(TimeDriver { gamma: gamma.clone() }),
        DriverSpec::Affine { constant, y, z, k, mean } => {
            let k = if k.is_empty() { vec![0.0; cfg.levy.len()] } else { k.clone() };
            Arc::new(AffineDriver::new(*constant, *y, *z, k, mean.clone(), &cfg.levy))
        }
        DriverSpec::Mixed { constant, y_lin, y_sin, z_lin, z_tanh, k_lin, k_tanh, mean_lin, mean_tanh } => Arc::new(MixedDriver {
            constant: *constant,
            y_lin: *y_lin,
            y_sin: *y_sin,
            z_lin: *z_lin,
            z_tanh: *z_tanh,
            k_lin: *k_lin,
            k_tanh: *k_tanh,
            mean_lin: *mean_lin,
            mean_tanh: *mean_tanh,
            weights: cfg.levy.weights(),
        }),
        DriverSpec::Linear => Arc::new(LinearDriver::new(cfg.linear.clone(), &grid, &cfg.levy)),
    })
}

/// Fixed-column CSV writer: every file starts with the run comment line.
struct CsvOut {
    dir: PathBuf,
    run: String,
    files: Vec<PathBuf>,
}

impl CsvOut {
    fn write(&mut self, name: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let path = self.dir.join(name);
        let mut file = fs::File::create(&path)?;
        writeln!(file, "# run={} manifest={MANIFEST_NAME}", self.run)?;
        let mut w = csv::Writer::from_writer(file);
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(header).map_err(io)?;
        for r in rows {
            w.write_record(r).map_err(io)?;
        }
        w.flush()?;
        self.files.push(path);
        Ok(())
    }

    /// `node,time,statistic,value,se`
    fn series(&mut self, name: &str, rows: &[(usize, f64, String, f64, f64)]) -> Result<()> {
        let rows: Vec<Vec<String>> =
            rows.iter().map(|(i, t, s, v, e)| vec![i.to_string(), fmt(*t), s.clone(), fmt(*v), fmt(*e)]).collect();
        self.write(name, &["node", "time", "statistic", "value", "se"], &rows)
    }

    /// `statistic,value,se`
    fn summary(&mut self, rows: &[(&str, f64, f64)]) -> Result<()> {
        let rows: Vec<Vec<String>> = rows.iter().map(|(s, v, e)| vec![s.to_string(), fmt(*v), fmt(*e)]).collect();
        self.write("summary.csv", &["statistic", "value", "se"], &rows)
    }
}

/// Shortest representation that round-trips.
fn fmt(x: f64) -> String {
    format!("{x:?}")
}

fn solution_rows(sol: &SolutionGrid) -> Vec<(usize, f64, String, f64, f64)> {
    let mut rows = Vec::new();
    for i in 0..=sol.grid().steps() {
        let t = sol.grid().node(i);
        let (y, ye) = stats::mean_se(sol.y_at(i));
        rows.push((i, t, "Y".to_string(), y, ye));
        let (z, ze) = stats::mean_se(sol.z_at(i));
        rows.push((i, t, "Z".to_string(), z, ze));
        for j in 0..sol.atoms() {
            let (k, ke) = stats::mean_se(sol.k_at(i, j));
            rows.push((i, t, format!("K{j}"), k, ke));
        }
    }
    rows
}

fn iteration_rows(rep: &PicardReport) -> Vec<Vec<String>> {
    (0..rep.deltas.len())
        .map(|n| vec![n.to_string(), fmt(rep.deltas[n]), fmt(rep.integrated[n]), fmt(rep.ratios[n])])
        .collect()
}

fn ensemble(cfg: &ScenarioConfig) -> Result<PathEnsemble> {
    let grid = build_grid(cfg.horizon, cfg.steps)?;
    simulate_ensemble(&grid, &cfg.levy, cfg.n_paths, cfg.seed).map_err(|e| e.in_module("levy_paths"))
}

/// Runs a validated scenario and writes its CSV files and manifest into
/// `out`. Module errors are returned unchanged; every completed run, also
/// one that did not converge or failed a hypothesis, leaves a manifest.
pub fn run(cfg: &ScenarioConfig, text: &str, out: &Path) -> Result<RunOutcome> {
    fs::create_dir_all(out)?;
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
    let clock = Instant::now();
    let run = run_id(text, cfg);
    let mut csv = CsvOut { dir: out.to_path_buf(), run: run.clone(), files: Vec::new() };
    let mut diag = Map::new();
    let mut summary = Vec::new();
    let ens = ensemble(cfg)?;
    info!("simulated {} paths on {} steps with {} atoms", cfg.n_paths, cfg.steps, cfg.levy.len());

    let status = match cfg.mode {
        Mode::Picard => {
            let driver = build_driver(&cfg.driver, cfg)?;
            let (sol, rep) = match cfg.scheme {
                Scheme::FullFreeze => picard_full_freeze(driver.as_ref(), cfg.mean, &cfg.terminal, &ens, &cfg.solver),
                Scheme::MeanFreeze => picard_mean_freeze(driver.as_ref(), &cfg.terminal, &ens, &cfg.solver),
            }
            .map_err(|e| e.in_module("picard_solver"))?;
            csv.series("solution.csv", &solution_rows(&sol))?;
            csv.write("iterations.csv", &["iteration", "delta", "integrated", "ratio"], &iteration_rows(&rep))?;
            csv.summary(&[
                ("y0", rep.y0, rep.y0_se),
                ("iterations", rep.iterations as f64, 0.0),
                ("beta", rep.beta, 0.0),
                ("lipschitz", rep.lipschitz, 0.0),
            ])?;
            diag.insert(
                "picard".into(),
                json!({ "scheme": format!("{:?}", rep.scheme), "iterations": rep.iterations, "converged": rep.converged,
                        "tol": rep.tol, "ridge": rep.ridge, "beta": rep.beta, "warnings": rep.warnings }),
            );
            summary.push(format!("Y(0) = {:.6} ± {:.6} after {} iterations", rep.y0, rep.y0_se, rep.iterations));
            if rep.converged {
                RunStatus::Success
            } else {
                RunStatus::NonConvergence
            }
        }
        Mode::Linear => {
            let opts = LinearOptions { form: cfg.form, direct: cfg.direct, ..Default::default() };
            let sol = solve_linear(&cfg.linear, &ens, None, &opts).map_err(|e| e.in_module("linear_engine"))?;
            let grid = ens.grid();
            let mut rows = Vec::new();
            let sys = &sol.system;
            for i in 0..=grid.steps() {
                let t = grid.node(i);
                let mut comps = vec![(Component::Y, "Ybar".to_string()), (Component::Z, "Zbar".to_string())];
                comps.extend((0..ens.atoms()).map(|j| (Component::K(j), format!("Kbar{j}"))));
                for (c, name) in comps {
                    let idx = sys.index(i, c);
                    rows.push((i, t, name.clone(), sol.neumann.v.values[idx], 0.0));
                    rows.push((i, t, format!("F_{name}"), sys.source[idx], sys.source_se[idx]));
                    if let Some(d) = &sol.direct {
                        rows.push((i, t, format!("direct_{name}"), d.values[idx], 0.0));
                    }
                }
            }
            csv.series("mean_vector.csv", &rows)?;
            let wrows: Vec<Vec<String>> = sol
                .neumann
                .windows
                .iter()
                .map(|w| vec![w.start.to_string(), w.end.to_string(), fmt(w.norm), w.terms.to_string()])
                .collect();
            csv.write("windows.csv", &["start", "end", "norm", "terms"], &wrows)?;
            let mut srows = vec![("y0", sol.closed.y0, sol.closed.y0_se)];
            if let Some(g) = sol.oracle_gap {
                srows.push(("oracle_gap", g, 0.0));
            }
            csv.summary(&srows)?;
            diag.insert(
                "linear".into(),
                json!({ "form": if cfg.form == SystemForm::Derived { "derived" } else { "published" },
                        "windows": sol.neumann.windows.len(), "max_window": sol.neumann.max_window(),
                        "oracle_gap": sol.oracle_gap }),
            );
            summary.push(format!("Y(0) = {:.6} ± {:.6}", sol.closed.y0, sol.closed.y0_se));
            RunStatus::Success
        }
        Mode::Compare => {
            let spec = cfg.compare.as_ref().ok_or_else(|| Error::Config("compare mode needs a [compare] section".into()))?;
            let sc = ComparisonScenario {
                g1: build_driver(&cfg.driver, cfg)?,
                g2: build_driver(&spec.driver2, cfg)?,
                xi1: cfg.terminal.clone(),
                xi2: spec.terminal2.clone(),
                eta_bound: spec.eta_bound.clone(),
            };
            let rep = run_comparison(&sc, &ens, &cfg.solver, &spec.probes, spec.override_hypotheses)
                .map_err(|e| e.in_module("comparison_harness"))?;
            let hrows: Vec<Vec<String>> = rep
                .hypotheses
                .checks()
                .iter()
                .map(|c| {
                    vec![
                        c.name.to_string(),
                        c.passed.to_string(),
                        c.probes.to_string(),
                        fmt(c.worst_slack),
                        c.counterexample.clone().unwrap_or_default(),
                    ]
                })
                .collect();
            csv.write("hypotheses.csv", &["hypothesis", "passed", "probes", "worst_slack", "counterexample"], &hrows)?;
            if let Some(m) = &rep.margins {
                let mut rows = Vec::new();
                for i in 0..m.min.len() {
                    let t = ens.grid().node(i);
                    rows.push((i, t, "min_margin".to_string(), m.min[i], m.se[i]));
                    rows.push((i, t, "max_margin".to_string(), m.max[i], 0.0));
                    rows.push((i, t, "mean_margin".to_string(), m.mean[i], 0.0));
                }
                csv.series("margins.csv", &rows)?;
                let irows: Vec<Vec<String>> = rep
                    .iterates
                    .iter()
                    .map(|c| vec![c.iteration.to_string(), fmt(c.worst_slack), c.ordered.to_string()])
                    .collect();
                csv.write("iterates.csv", &["iteration", "worst_slack", "ordered"], &irows)?;
            }
            csv.summary(&[("y1_0", rep.y1_0, 0.0), ("y2_0", rep.y2_0, 0.0), ("min_margin", rep.min_margin, 0.0)])?;
            let violated: Vec<&str> = rep.hypotheses.checks().iter().filter(|c| !c.passed).map(|c| c.name).collect();
            diag.insert(
                "comparison".into(),
                json!({ "violated": violated, "solved": rep.solved, "passed": rep.passed, "converged": rep.converged,
                        "min_margin_node": rep.min_margin_node }),
            );
            for c in rep.hypotheses.checks().iter().filter(|c| !c.passed) {
                summary.push(format!(
                    "hypothesis {} violated: {}",
                    c.name,
                    c.counterexample.as_deref().unwrap_or("worst slack below zero")
                ));
            }
            if rep.solved {
                summary.push(format!("minimum margin {:.6} at node {}", rep.min_margin, rep.min_margin_node));
            }
            if !violated.is_empty() || rep.passed == Some(false) {
                RunStatus::HypothesisFailure
            } else if !rep.converged {
                RunStatus::NonConvergence
            } else {
                RunStatus::Success
            }
        }
        Mode::Utility => {
            let spec = cfg.utility.as_ref().ok_or_else(|| Error::Config("utility mode needs [wealth] and [utility]".into()))?;
            let adj = adjoint_state(&spec.coeffs, &ens, &cfg.solver.basis).map_err(|e| e.in_module("recursive_utility"))?;
            let np = ens.n_paths();
            let mut rows = Vec::new();
            for i in 0..=ens.grid().steps() {
                let t = ens.grid().node(i);
                let (l, le) = stats::mean_se(adj.lambda.lambda_at(i));
                rows.push((i, t, "lambda".to_string(), l, le));
                rows.push((i, t, "lambda_mean_exact".to_string(), adj.lambda.mean_lambda[i], 0.0));
                let (p, pe) = stats::mean_se(&adj.p[i * np..(i + 1) * np]);
                rows.push((i, t, "p".to_string(), p, pe));
                let pis: Vec<f64> = (0..np).map(|n| adj.pi_hat.value(i, n)).collect();
                let (pi, pie) = stats::mean_se(&pis);
                rows.push((i, t, "pi_hat".to_string(), pi, pie));
            }
            csv.series("adjoints.csv", &rows)?;
            let (base, scan) = if spec.scan {
                optimality_scan(&spec.wealth, &spec.coeffs, &adj.pi_hat, &ens, spec.route)
            } else {
                evaluate_j(&spec.wealth, &spec.coeffs, &adj.pi_hat, &ens, spec.route).map(|b| (b, Vec::new()))
            }
            .map_err(|e| e.in_module("recursive_utility"))?;
            let prow: Vec<Vec<String>> = scan
                .iter()
                .map(|p| vec![p.label.clone(), fmt(p.j.value), fmt(p.j.se), fmt(p.gap), fmt(p.combined_se), p.dominated.to_string()])
                .collect();
            csv.write("perturbations.csv", &["perturbation", "j", "se", "gap", "combined_se", "dominated"], &prow)?;
            csv.summary(&[
                ("j_candidate", base.value, base.se),
                ("euler_residual", adj.lambda.euler_residual, 0.0),
                ("clipped", adj.clipped as f64, 0.0),
            ])?;
            let beaten = scan.iter().filter(|p| !p.dominated).count();
            diag.insert(
                "utility".into(),
                json!({ "route": format!("{:?}", spec.route), "perturbations": scan.len(), "not_dominated": beaten,
                        "clipped": adj.clipped }),
            );
            summary.push(format!("J(π̂) = {:.6} ± {:.6}", base.value, base.se));
            if beaten > 0 {
                summary.push(format!("{beaten} of {} perturbations exceed J(π̂) by more than 3 SE", scan.len()));
            }
            RunStatus::Success
        }
        Mode::QCheck => {
            let picard = cfg.qcheck_picard.then_some(&cfg.solver);
            let rep = q_special_solve(&cfg.linear, &ens, picard).map_err(|e| e.in_module("linear_engine"))?;
            let rows: Vec<_> =
                rep.mean_path.iter().enumerate().map(|(i, &v)| (i, ens.grid().node(i), "EQ_Y".to_string(), v, 0.0)).collect();
            csv.series("q_mean.csv", &rows)?;
            let mut srows = vec![
                ("terminal_weighted", rep.terminal_weighted.value, rep.terminal_weighted.se),
                ("terminal_shifted", rep.terminal_shifted.value, rep.terminal_shifted.se),
                ("y0_weighted", rep.y0_weighted.value, rep.y0_weighted.se),
                ("y0_shifted", rep.y0_shifted.value, rep.y0_shifted.se),
                ("z_score", rep.z_score, 0.0),
            ];
            if let Some(p) = &rep.picard {
                srows.push(("y0_picard", p.value, p.se));
            }
            csv.summary(&srows)?;
            diag.insert("qcheck".into(), json!({ "z_score": rep.z_score }));
            summary.push(format!("E_Q route z-score {:.3}", rep.z_score));
            RunStatus::Success
        }
    };

    let manifest_path = out.join(MANIFEST_NAME);
    let files: Vec<String> =
        csv.files.iter().filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned())).collect();
    let manifest = json!({
        "run": run,
        "config_hash": run,
        "mode": cfg.mode.name(),
        "seed": cfg.seed,
        "n_paths": cfg.n_paths,
        "steps": cfg.steps,
        "atoms": cfg.levy.len(),
        "version": env!("CARGO_PKG_VERSION"),
        "started_unix": started,
        "wall_clock_seconds": clock.elapsed().as_secs_f64(),
        "status": status.name(),
        "files": files,
        "diagnostics": Value::Object(diag),
    });
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest).map_err(|e| Error::Io(e.into()))?)?;
    Ok(RunOutcome { status, run_id: run, files: csv.files, manifest: manifest_path, summary })
}
