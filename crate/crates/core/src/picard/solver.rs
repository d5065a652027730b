use log::warn;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::driver::admit_driver;
use crate::model::{mean_functional_eval, Driver, DriverArgs, MeanFunctional, PreparedTerminal, SolutionGrid, TerminalCondition, YDependence};
use crate::paths::PathEnsemble;
use crate::picard::contraction::default_beta;
use crate::picard::regression::{ConditionalExpectation, RegressionBasis};
use crate::stats::{self, CHUNK};

#[derive(Clone, Debug)]
pub struct PicardSettings {
    /// Stop when `max_i E|Yⁿ⁺¹(t_i) − Yⁿ(t_i)|²` falls below this.
    pub tol: f64,
    pub max_iter: usize,
    pub basis: RegressionBasis,
    /// Randomized admission probes for the driver.
    pub probes: usize,
    /// Half-width of the probe box.
    pub probe_box: f64,
}

impl Default for PicardSettings {
    fn default() -> Self {
        PicardSettings { tol: 1e-6, max_iter: 50, basis: RegressionBasis::default(), probes: 1000, probe_box: 5.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scheme {
    FullFreeze,
    MeanFreeze,
}

/// Convergence record of a Picard run.
#[derive(Clone, Debug)]
pub struct PicardReport {
    pub scheme: Scheme,
    /// `δ_n = max_i E|Yⁿ⁺¹(t_i) − Yⁿ(t_i)|²`, starting at `n = 0`.
    pub deltas: Vec<f64>,
    /// `Σ_{i<M} E|Yⁿ⁺¹(t_i) − Yⁿ(t_i)|² Δt`.
    pub integrated: Vec<f64>,
    /// `δ_n / δ_{n−1}`; the first entry is NaN.
    pub ratios: Vec<f64>,
    /// Index `n` of the first `δ_n` below tolerance, i.e. the number of map
    /// applications that produced a new iterate.
    pub iterations: usize,
    pub converged: bool,
    pub tol: f64,
    /// Relative ridge factor used by every regression.
    pub ridge: f64,
    pub lipschitz: f64,
    pub mean_bound: f64,
    /// Default weight `1 + 12·max(C, C′)²` for the β-norm.
    pub beta: f64,
    pub y0: f64,
    /// Standard error of `Y(0)` from the pathwise discounted cash flow.
    pub y0_se: f64,
    pub warnings: Vec<String>,
}

impl PicardReport {
    fn new(scheme: Scheme, tol: f64, ridge: f64, lipschitz: f64, mean_bound: f64) -> Self {
        PicardReport {
            scheme,
            deltas: Vec::new(),
            integrated: Vec::new(),
            ratios: Vec::new(),
            iterations: 0,
            converged: false,
            tol,
            ridge,
            lipschitz,
            mean_bound,
            beta: default_beta(lipschitz, mean_bound),
            y0: f64::NAN,
            y0_se: f64::NAN,
            warnings: Vec::new(),
        }
    }

    fn push(&mut self, delta: f64, integrated: f64) {
        let ratio = self.deltas.last().map_or(f64::NAN, |&d| if d > 0.0 { delta / d } else { f64::NAN });
        self.deltas.push(delta);
        self.integrated.push(integrated);
        self.ratios.push(ratio);
    }
}

/// Initial iterate: `Y⁰ ≡ E[ξ]` with `Y⁰(T) = ξ`, `Z⁰ = K⁰ = 0`.
fn initial_iterate(xi: &[f64], ens: &PathEnsemble) -> SolutionGrid {
    let grid = ens.grid();
    let mut sol = SolutionGrid::zeros(grid, &ens.levy().weights(), ens.n_paths());
    let m = stats::mean(xi);
    sol.y.iter_mut().for_each(|v| *v = m);
    sol.y_at_mut(grid.steps()).copy_from_slice(xi);
    sol.refresh_means();
    sol
}

/// Driver values `f(t_i, Yⁿ, Zⁿ, Kⁿ, μⁿ(t_i))` per node and path.
pub(crate) fn evaluate_driver(driver: &dyn Driver, phi: MeanFunctional, it: &SolutionGrid) -> Vec<f64> {
    let grid = it.grid().clone();
    let np = it.n_paths();
    let j = it.atoms();
    let mut out = vec![0.0; (grid.steps() + 1) * np];
    for (i, row) in out.chunks_mut(np).enumerate() {
        let mean = if driver.mean_dim() > 0 { mean_functional_eval(phi, it, i) } else { Vec::new() };
        let t = grid.node(i);
        let (y, z) = (it.y_at(i), it.z_at(i));
        row.par_chunks_mut(CHUNK).enumerate().for_each(|(c, slot)| {
            let mut k = vec![0.0; j];
            for (o, v) in slot.iter_mut().enumerate() {
                let n = c * CHUNK + o;
                it.k_path(i, n, &mut k);
                *v = driver.eval(&DriverArgs { t, node: i, path: n, y: y[n], z: z[n], k: &k, mean: &mean });
            }
        });
    }
    out
}

/// Covariation estimates of `Z(t_i)` and `K(t_i, ·)` from the innovation
/// `r = Y(t_{i+1}) − E_i[Y(t_{i+1})]`.
fn fill_zk(ce: &ConditionalExpectation<'_>, i: usize, r: &[f64], sol: &mut SolutionGrid) -> Result<()> {
    let ens = ce.ensemble();
    let np = ens.n_paths();
    let atoms = ens.atoms();
    let dt = ens.grid().dt();
    let mut targets: Vec<Vec<f64>> = Vec::with_capacity(1 + atoms);
    targets.push((0..np).map(|n| r[n] * ens.dw(i, n)).collect());
    for j in 0..atoms {
        targets.push((0..np).map(|n| r[n] * ens.dn(i, j, n)).collect());
    }
    let refs: Vec<&[f64]> = targets.iter().map(Vec::as_slice).collect();
    let fits = ce.fit(i, &refs)?;
    for (dst, src) in sol.z_at_mut(i).iter_mut().zip(&fits[0]) {
        *dst = src / dt;
    }
    for j in 0..atoms {
        let c = ens.compensator(i, j);
        for (dst, src) in sol.k_at_mut(i, j).iter_mut().zip(&fits[1 + j]) {
            *dst = src / c;
        }
    }
    Ok(())
}

fn copy_terminal_zk(sol: &mut SolutionGrid) {
    let m = sol.grid().steps();
    let np = sol.n_paths();
    let j = sol.atoms();
    sol.z.copy_within((m - 1) * np..m * np, m * np);
    sol.k.copy_within((m - 1) * j * np..m * j * np, m * j * np);
}

/// Solves `y = tilde + h g(y)` by fixed-point iteration, returning `y`,
/// `g(y)` and whether the iteration settled.
fn implicit_fixed_point(tilde: f64, h: f64, g: impl Fn(f64) -> f64) -> (f64, f64, bool) {
    let mut y = tilde;
    let mut gv = g(y);
    for _ in 0..200 {
        let y1 = tilde + h * gv;
        let step = (y1 - y).abs();
        y = y1;
        gv = g(y);
        if step <= 1e-15 * (1.0 + y.abs()) {
            return (y, gv, true);
        }
    }
    (y, gv, false)
}

/// One backward sweep with a frozen driver: `Y_i = E_i[Y_{i+1} + ½Δt(f̂_i + f̂_{i+1})]`.
pub(crate) fn sweep_full(fhat: &[f64], xi: &[f64], ce: &ConditionalExpectation<'_>) -> Result<SolutionGrid> {
    let ens = ce.ensemble();
    let grid = ens.grid();
    let np = ens.n_paths();
    let m = grid.steps();
    let half = 0.5 * grid.dt();
    let mut sol = SolutionGrid::zeros(grid, &ens.levy().weights(), np);
    sol.y_at_mut(m).copy_from_slice(xi);
    for i in (0..m).rev() {
        let y_next = sol.y_at(i + 1).to_vec();
        let fi = &fhat[i * np..(i + 1) * np];
        let fnx = &fhat[(i + 1) * np..(i + 2) * np];
        let ty: Vec<f64> = (0..np).map(|n| y_next[n] + half * (fi[n] + fnx[n])).collect();
        let mut fits = ce.fit(i, &[&ty, &y_next])?;
        let proj = fits.pop().unwrap_or_default();
        sol.y_at_mut(i).copy_from_slice(&fits[0]);
        let r: Vec<f64> = y_next.iter().zip(&proj).map(|(a, b)| a - b).collect();
        fill_zk(ce, i, &r, &mut sol)?;
    }
    copy_terminal_zk(&mut sol);
    sol.refresh_means();
    Ok(sol)
}

/// `ξ + Σ_i ½Δt (f_i + f_{i+1})` per path; its mean is `Y(0)`.
fn cash_flow_se(xi: &[f64], f: &[f64], np: usize, m: usize, dt: f64) -> (f64, f64) {
    let flows: Vec<f64> = (0..np)
        .map(|n| {
            let mut s = xi[n];
            for i in 0..m {
                s += 0.5 * dt * (f[i * np + n] + f[(i + 1) * np + n]);
            }
            s
        })
        .collect();
    stats::mean_se(&flows)
}

/// Backward sweep for a frozen driver array, exposed for diagnostics.
pub fn solve_inner(
    fhat: &[f64],
    tc: &TerminalCondition,
    ens: &PathEnsemble,
    basis: &RegressionBasis,
) -> Result<SolutionGrid> {
    let np = ens.n_paths();
    if fhat.len() != (ens.grid().steps() + 1) * np {
        return Err(Error::Domain("frozen driver array does not match the ensemble shape".into()));
    }
    if let Some(p) = fhat.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical { node: p / np, message: "frozen driver value is not finite".into() });
    }
    let xi = PreparedTerminal::new(tc, ens)?.values;
    let ce = ConditionalExpectation::new(ens, basis.clone());
    sweep_full(fhat, &xi, &ce)
}

fn admit(
    driver: &dyn Driver,
    ens: &PathEnsemble,
    mean_dim: usize,
    settings: &PicardSettings,
) -> Result<f64> {
    let grid = ens.grid();
    admit_driver(driver, grid, ens.levy(), mean_dim, settings.probes)?;
    let c = driver.lipschitz();
    if grid.dt() * c >= 1.0 {
        return Err(Error::Config(format!(
            "step restriction violated: Δt·C = {} must be below 1; refine the grid",
            grid.dt() * c
        )));
    }
    Ok(c)
}

/// Full-freeze Picard iteration: the driver is evaluated on the previous
/// iterate (state and mean) and the resulting BSDE is solved by one sweep.
pub fn picard_full_freeze(
    driver: &dyn Driver,
    phi: MeanFunctional,
    tc: &TerminalCondition,
    ens: &PathEnsemble,
    settings: &PicardSettings,
) -> Result<(SolutionGrid, PicardReport)> {
    let prepared = PreparedTerminal::new(tc, ens)?;
    prepared.second_moment()?;
    let xi = prepared.values;
    let weights = ens.levy().weights();
    let c = admit(driver, ens, phi.dim(weights.len()), settings)?;
    let c_mean = phi.derivative_bound(&weights, settings.probe_box);
    let mut report = PicardReport::new(Scheme::FullFreeze, settings.tol, settings.basis.ridge, c, c_mean);
    let ce = ConditionalExpectation::new(ens, settings.basis.clone());
    let mut current = initial_iterate(&xi, ens);
    let mut last_f = Vec::new();
    for n in 0..settings.max_iter {
        let fhat = evaluate_driver(driver, phi, &current);
        let next = sweep_full(&fhat, &xi, &ce)?;
        let (d, di) = next.y_distance(&current);
        report.push(d, di);
        current = next;
        last_f = fhat;
        if d < settings.tol {
            report.converged = true;
            report.iterations = n;
            break;
        }
    }
    finish(&mut report, &xi, &last_f, ens, settings.max_iter);
    report.y0 = current.ybar[0];
    Ok((current, report))
}

fn finish(report: &mut PicardReport, xi: &[f64], f: &[f64], ens: &PathEnsemble, max_iter: usize) {
    if !report.converged {
        report.iterations = max_iter;
        let msg = format!(
            "Picard iteration stopped after {max_iter} iterations with δ = {:.3e} above tolerance {:.1e}",
            report.deltas.last().copied().unwrap_or(f64::NAN),
            report.tol
        );
        warn!("{msg}");
        report.warnings.push(msg);
    }
    if !f.is_empty() {
        let (_, se) = cash_flow_se(xi, f, ens.n_paths(), ens.grid().steps(), ens.grid().dt());
        report.y0_se = se;
    }
}

/// Mean-freeze Picard iteration driven one outer step at a time.
///
/// Each step freezes `Ȳⁿ⁻¹` and solves the inner BSDE by a θ = ½ sweep with
/// a pathwise implicit solve for `Y(t_i)`.
pub struct MeanFreeze<'a> {
    driver: &'a dyn Driver,
    ce: ConditionalExpectation<'a>,
    xi: Vec<f64>,
    current: SolutionGrid,
    g: Vec<f64>,
    report: PicardReport,
}

impl<'a> MeanFreeze<'a> {
    pub fn new(
        driver: &'a dyn Driver,
        tc: &TerminalCondition,
        ens: &'a PathEnsemble,
        settings: &PicardSettings,
    ) -> Result<Self> {
        if driver.mean_dim() > 1 {
            return Err(Error::Capability(
                "the mean-freeze scheme accepts drivers that read the mean of Y only".into(),
            ));
        }
        let prepared = PreparedTerminal::new(tc, ens)?;
        prepared.second_moment()?;
        let xi = prepared.values;
        let c = admit(driver, ens, 1, settings)?;
        let report = PicardReport::new(Scheme::MeanFreeze, settings.tol, settings.basis.ridge, c, 1.0);
        let current = initial_iterate(&xi, ens);
        Ok(MeanFreeze { driver, ce: ConditionalExpectation::new(ens, settings.basis.clone()), xi, current, g: Vec::new(), report })
    }

    pub fn current(&self) -> &SolutionGrid {
        &self.current
    }

    pub fn report(&self) -> &PicardReport {
        &self.report
    }

    /// Performs one outer iteration; returns `(δ_n, integrated δ_n)`.
    pub fn step(&mut self) -> Result<(f64, f64)> {
        let frozen = self.current.ybar.clone();
        let (next, g) = self.sweep(&frozen)?;
        let (d, di) = next.y_distance(&self.current);
        self.report.push(d, di);
        self.current = next;
        self.g = g;
        Ok((d, di))
    }

    fn sweep(&self, ybar: &[f64]) -> Result<(SolutionGrid, Vec<f64>)> {
        let ens = self.ce.ensemble();
        let grid = ens.grid();
        let np = ens.n_paths();
        let m = grid.steps();
        let atoms = ens.atoms();
        let half = 0.5 * grid.dt();
        let driver = self.driver;
        let mut sol = SolutionGrid::zeros(grid, &ens.levy().weights(), np);
        let mut g = vec![0.0; (m + 1) * np];
        sol.y_at_mut(m).copy_from_slice(&self.xi);
        let eval_node = |sol: &SolutionGrid, i: usize, out: &mut [f64]| {
            let t = grid.node(i);
            let mean = [ybar[i]];
            let (y, z) = (sol.y_at(i), sol.z_at(i));
            out.par_chunks_mut(CHUNK).enumerate().for_each(|(c, slot)| {
                let mut k = vec![0.0; atoms];
                for (o, v) in slot.iter_mut().enumerate() {
                    let n = c * CHUNK + o;
                    sol.k_path(i, n, &mut k);
                    *v = driver.eval(&DriverArgs { t, node: i, path: n, y: y[n], z: z[n], k: &k, mean: &mean });
                }
            });
        };
        for i in (0..m).rev() {
            let y_next = sol.y_at(i + 1).to_vec();
            let (tilde, proj) = if i + 1 == m {
                let proj = self.ce.fit(i, &[&y_next])?.pop().unwrap_or_default();
                let r: Vec<f64> = y_next.iter().zip(&proj).map(|(a, b)| a - b).collect();
                fill_zk(&self.ce, i, &r, &mut sol)?;
                copy_terminal_zk(&mut sol);
                eval_node(&sol, m, &mut g[m * np..]);
                let gm = &g[m * np..];
                let ty: Vec<f64> = (0..np).map(|n| y_next[n] + half * gm[n]).collect();
                (self.ce.fit(i, &[&ty])?.pop().unwrap_or_default(), None)
            } else {
                let gn = &g[(i + 1) * np..(i + 2) * np];
                let ty: Vec<f64> = (0..np).map(|n| y_next[n] + half * gn[n]).collect();
                let mut fits = self.ce.fit(i, &[&ty, &y_next])?;
                let proj = fits.pop().unwrap_or_default();
                (fits.pop().unwrap_or_default(), Some(proj))
            };
            if let Some(proj) = proj {
                let r: Vec<f64> = y_next.iter().zip(&proj).map(|(a, b)| a - b).collect();
                fill_zk(&self.ce, i, &r, &mut sol)?;
            }
            // pathwise implicit step y = tilde + ½Δt g(t_i, y, z, k, ȳ)
            let t = grid.node(i);
            let mean = [ybar[i]];
            let z = sol.z_at(i).to_vec();
            let ks: Vec<Vec<f64>> = (0..atoms).map(|j| sol.k_at(i, j).to_vec()).collect();
            let dep = driver.y_dependence(t);
            let mut y_new = vec![0.0; np];
            let gi = &mut g[i * np..(i + 1) * np];
            let failures: usize = y_new
                .par_chunks_mut(CHUNK)
                .zip(gi.par_chunks_mut(CHUNK))
                .enumerate()
                .map(|(c, (ys, gs))| {
                    let mut k = vec![0.0; atoms];
                    let mut bad = 0;
                    for o in 0..ys.len() {
                        let n = c * CHUNK + o;
                        for (j, kj) in k.iter_mut().enumerate() {
                            *kj = ks[j][n];
                        }
                        let eval = |y: f64| driver.eval(&DriverArgs { t, node: i, path: n, y, z: z[n], k: &k, mean: &mean });
                        let (y, gv, done) = match dep {
                            Some(YDependence::Linear(a)) => {
                                let rest = eval(0.0);
                                let y = (tilde[n] + half * rest) / (1.0 - half * a);
                                (y, rest + a * y, true)
                            }
                            Some(d) => {
                                let rest = eval(0.0);
                                implicit_fixed_point(tilde[n], half, |y| rest + d.value(y))
                            }
                            None => implicit_fixed_point(tilde[n], half, eval),
                        };
                        if !done || !y.is_finite() {
                            bad += 1;
                        }
                        ys[o] = y;
                        gs[o] = gv;
                    }
                    bad
                })
                .sum();
            if failures > 0 {
                return Err(Error::Numerical { node: i, message: format!("implicit step did not converge on {failures} paths") });
            }
            sol.y_at_mut(i).copy_from_slice(&y_new);
        }
        sol.refresh_means();
        Ok((sol, g))
    }

    /// Iterates until `δ_n < tol` or `max_iter` outer steps.
    pub fn run(mut self, max_iter: usize) -> Result<(SolutionGrid, PicardReport)> {
        let tol = self.report.tol;
        for n in 0..max_iter {
            let (d, _) = self.step()?;
            if d < tol {
                self.report.converged = true;
                self.report.iterations = n;
                break;
            }
        }
        let ens = self.ce.ensemble();
        finish(&mut self.report, &self.xi, &self.g, ens, max_iter);
        self.report.y0 = self.current.ybar[0];
        Ok((self.current, self.report))
    }
}

/// Mean-freeze Picard iteration for drivers `g(t, y, z, k, E[Y])`.
pub fn picard_mean_freeze(
    driver: &dyn Driver,
    tc: &TerminalCondition,
    ens: &PathEnsemble,
    settings: &PicardSettings,
) -> Result<(SolutionGrid, PicardReport)> {
    MeanFreeze::new(driver, tc, ens, settings)?.run(settings.max_iter)
}
