use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linear::gamma::{GammaEnsemble, MeanGamma};
use crate::model::{LinearCoefficients, PathwiseGamma, PreparedTerminal};
use crate::paths::{PathEnsemble, TimeGrid};
use crate::stats;

/// Which rows of the mean system carry the kernel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SystemForm {
    /// Only the `Ȳ` row is coupled; `Z̄` and `K̄` are pure sources because
    /// `Γ(t, ·)` does not depend on the noise at `t`.
    #[default]
    Derived,
    /// `Z̄` and `K̄` rows repeat the `Ȳ` row scaled by `β₁(t)` and `η₁(t, ζ)`.
    Published,
}

/// Unknown of the mean system at one node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Component {
    Y,
    Z,
    K(usize),
}

impl Component {
    fn offset(self) -> usize {
        match self {
            Component::Y => 0,
            Component::Z => 1,
            Component::K(j) => 2 + j,
        }
    }
}

/// Discretized `V = F + AV` with `V(t_i) = (Ȳ, Z̄, K̄_1..K̄_J)` stored node-major.
#[derive(Clone, Debug)]
pub struct VolterraSystem {
    grid: TimeGrid,
    atoms: usize,
    form: SystemForm,
    pub kernel: DMatrix<f64>,
    pub source: DVector<f64>,
    /// Monte Carlo standard error of each source entry.
    pub source_se: DVector<f64>,
    /// False when the `Z̄`, `K̄` sources were skipped because the Malliavin
    /// derivatives are unavailable and no kernel entry reads them.
    pub zk_sources: bool,
}

impl VolterraSystem {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn atoms(&self) -> usize {
        self.atoms
    }

    pub fn form(&self) -> SystemForm {
        self.form
    }

    /// Unknowns per node, `2 + J`.
    pub fn width(&self) -> usize {
        2 + self.atoms
    }

    pub fn dim(&self) -> usize {
        self.width() * (self.grid.steps() + 1)
    }

    pub fn index(&self, node: usize, c: Component) -> usize {
        node * self.width() + c.offset()
    }

    /// Builds a system from explicit blocks; used by oracles and tests.
    pub fn from_parts(grid: TimeGrid, atoms: usize, form: SystemForm, kernel: DMatrix<f64>, source: DVector<f64>) -> Result<Self> {
        let dim = (2 + atoms) * (grid.steps() + 1);
        if kernel.nrows() != dim || kernel.ncols() != dim || source.len() != dim {
            return Err(Error::Domain(format!("mean system blocks must have dimension {dim}")));
        }
        let source_se = DVector::zeros(dim);
        Ok(VolterraSystem { grid, atoms, form, kernel, source, source_se, zk_sources: true })
    }
}

/// Mean vector `V(t_i)` on the grid.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanVector {
    atoms: usize,
    pub values: DVector<f64>,
}

impl MeanVector {
    fn width(&self) -> usize {
        2 + self.atoms
    }

    pub fn nodes(&self) -> usize {
        self.values.len() / self.width()
    }

    pub fn y(&self, i: usize) -> f64 {
        self.values[i * self.width()]
    }

    pub fn z(&self, i: usize) -> f64 {
        self.values[i * self.width() + 1]
    }

    pub fn k(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.width() + 2 + j]
    }

    pub fn y_series(&self) -> Vec<f64> {
        (0..self.nodes()).map(|i| self.y(i)).collect()
    }

    pub fn z_series(&self) -> Vec<f64> {
        (0..self.nodes()).map(|i| self.z(i)).collect()
    }

    pub fn k_series(&self, j: usize) -> Vec<f64> {
        (0..self.nodes()).map(|i| self.k(i, j)).collect()
    }

    /// `‖self − other‖_∞`.
    pub fn max_abs_diff(&self, other: &MeanVector) -> f64 {
        (&self.values - &other.values).amax()
    }
}

/// Trapezoid weight of node `l` in `∫_{t_i}^{T}`; zero outside `[t_i, T]`.
pub(crate) fn quad_weight(i: usize, l: usize, m: usize, dt: f64) -> f64 {
    if l < i || i == m {
        0.0
    } else if l == i || l == m {
        0.5 * dt
    } else {
        dt
    }
}

fn capability_hint(e: Error) -> Error {
    match e {
        Error::Capability(msg) => Error::Capability(format!("{msg}; the closed-form pipeline needs Malliavin derivatives, use the Picard solver instead")),
        other => other,
    }
}

/// Assembles the kernel and the Monte Carlo sources of the mean system.
///
/// With `pathwise = Some(..)` the deterministic `γ` is replaced by the
/// per-path values and the sources gain the terms in its Malliavin
/// derivatives.
pub fn assemble_system(
    coeffs: &LinearCoefficients,
    ens: &PathEnsemble,
    gamma: &GammaEnsemble,
    pathwise: Option<&PathwiseGamma>,
    form: SystemForm,
) -> Result<VolterraSystem> {
    let grid = ens.grid().clone();
    let m = grid.steps();
    let dt = grid.dt();
    let np = ens.n_paths();
    let levy = ens.levy();
    let atoms = levy.len();
    let width = 2 + atoms;
    let dim = width * (m + 1);
    let eg = MeanGamma::new(&coeffs.alpha1, &grid);

    let mut kernel = DMatrix::zeros(dim, dim);
    for i in 0..m {
        let t = grid.node(i);
        let scale: Vec<f64> = match form {
            SystemForm::Derived => vec![1.0],
            SystemForm::Published => {
                let mut s = vec![1.0, coeffs.beta1.value(t)];
                s.extend(levy.atoms().iter().enumerate().map(|(j, a)| coeffs.eta1.value(t, j, a.mark)));
                s
            }
        };
        for l in i..=m {
            let tl = grid.node(l);
            let base = quad_weight(i, l, m, dt) * eg.value(i, l);
            let mut cols = vec![coeffs.alpha2.value(tl), coeffs.beta2.value(tl)];
            cols.extend(levy.atoms().iter().enumerate().map(|(j, a)| coeffs.eta2.value(tl, j, a.mark) * a.weight));
            for (r, s) in scale.iter().enumerate() {
                for (c, coef) in cols.iter().enumerate() {
                    kernel[(i * width + r, l * width + c)] = s * base * coef;
                }
            }
        }
    }

    let prepared = PreparedTerminal::new(&coeffs.terminal, ens)?;
    let xi = &prepared.values;
    let needs_zk = form == SystemForm::Published || !coeffs.beta2.is_zero() || !coeffs.eta2.is_zero();
    let terminal_known = match prepared.malliavin_b(0.0, 0) {
        Ok(_) => true,
        Err(Error::Capability(_)) => false,
        Err(e) => return Err(e),
    };
    let gamma_known = pathwise.is_none_or(|p| p.d_brownian.is_some() && p.d_jump.is_some());
    let zk_sources = terminal_known && gamma_known;
    if needs_zk && !zk_sources {
        return Err(capability_hint(Error::Capability(
            "mean-Z or mean-K coupling needs Malliavin derivatives of the terminal value and of γ".into(),
        )));
    }
    let mut source = DVector::zeros(dim);
    let mut source_se = DVector::zeros(dim);
    // Backward running sum Σ_{l>i} w_il e^{L_l} γ_l per path (pathwise γ only).
    let mut running = vec![0.0; np];
    let mut y_sample = vec![0.0; np];
    let mut d_sample = vec![0.0; np];
    for i in (0..=m).rev() {
        let t = grid.node(i);
        let li = gamma.log_at(i);
        let lm = gamma.log_at(m);
        let g_m: Vec<f64> = li.iter().zip(lm).map(|(a, b)| (b - a).exp()).collect();

        // Ȳ row: E[ξΓ(t_i,T)] + Σ_l w_il E[Γ(t_i,t_l)γ_l]
        let mut det = 0.0;
        match pathwise {
            Some(pg) => {
                let gi = pg.at(i);
                for n in 0..np {
                    let own = if i < m { 0.5 * dt * gi[n] } else { 0.0 };
                    y_sample[n] = xi[n] * g_m[n] + (-li[n]).exp() * running[n] + own;
                }
                // update the running sum to cover l ≥ i for the next (earlier) node
                for n in 0..np {
                    let w = if i == m { 0.5 * dt } else { dt };
                    running[n] += w * li[n].exp() * gi[n];
                }
            }
            None => {
                for l in i..=m {
                    det += quad_weight(i, l, m, dt) * eg.value(i, l) * coeffs.gamma.value(grid.node(l));
                }
                for n in 0..np {
                    y_sample[n] = xi[n] * g_m[n];
                }
            }
        }
        let (fy, fy_se) = stats::mean_se(&y_sample);
        let fy = fy + det;
        source[i * width] = fy;
        source_se[i * width] = fy_se;

        // Σ_l w_il 𝔼Γ(t_i,t_l), multiplies the Malliavin derivatives of γ
        let gamma_weight: f64 = (i..=m).map(|l| quad_weight(i, l, m, dt) * eg.value(i, l)).sum();

        if !zk_sources {
            continue;
        }

        // Z̄ row
        let d_gamma_b = pathwise.and_then(|p| p.d_brownian.as_ref()).map_or(0.0, |d| d[i]);
        if prepared.brownian_free() {
            source[i * width + 1] = d_gamma_b * gamma_weight;
        } else {
            for n in 0..np {
                d_sample[n] = prepared.malliavin_b(t, n).map_err(capability_hint)? * g_m[n];
            }
            let (v, se) = stats::mean_se(&d_sample);
            source[i * width + 1] = v + d_gamma_b * gamma_weight;
            source_se[i * width + 1] = se;
        }
        if form == SystemForm::Published {
            source[i * width + 1] += coeffs.beta1.value(t) * fy;
        }

        // K̄ rows
        for (j, a) in levy.atoms().iter().enumerate() {
            let d_gamma_n = pathwise.and_then(|p| p.d_jump.as_ref()).map_or(0.0, |d| d[i * atoms + j]);
            for n in 0..np {
                d_sample[n] = prepared.malliavin_n(t, j, n).map_err(capability_hint)? * g_m[n];
            }
            let (v, se) = stats::mean_se(&d_sample);
            let mut f = v + d_gamma_n * gamma_weight;
            if form == SystemForm::Published {
                f += coeffs.eta1.value(t, j, a.mark) * fy;
            }
            source[i * width + 2 + j] = f;
            source_se[i * width + 2 + j] = se;
        }
    }
    if let Some(p) = source.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical { node: p / width, message: "mean-system source is not finite".into() });
    }
    Ok(VolterraSystem { grid, atoms, form, kernel, source, source_se, zk_sources })
}

fn window_range(sys: &VolterraSystem, start: usize, end: usize) -> std::ops::Range<usize> {
    start * sys.width()..(end + 1) * sys.width()
}

/// Spectral norm of a dense block by power iteration on `BᵀB`, stopped at
/// 1e-10 relative change.
pub fn spectral_norm(block: &DMatrix<f64>) -> f64 {
    let n = block.ncols();
    if n == 0 || block.amax() == 0.0 {
        return 0.0;
    }
    let gram = block.transpose() * block;
    let mut v = DVector::from_fn(n, |k, _| 1.0 + 1e-3 * k as f64);
    v /= v.norm();
    let mut est = 0.0f64;
    for _ in 0..100_000 {
        let w = &gram * &v;
        let lambda = w.norm();
        if lambda == 0.0 {
            return 0.0;
        }
        v = w / lambda;
        if (lambda - est).abs() <= 1e-10 * lambda {
            est = lambda;
            break;
        }
        est = lambda;
    }
    est.sqrt()
}

/// Induced 2-norm of the kernel restricted to nodes `start..=end`.
pub fn operator_norm_estimate(sys: &VolterraSystem, start: usize, end: usize) -> f64 {
    assert!(start <= end && end <= sys.grid.steps(), "window must lie on the grid");
    let r = window_range(sys, start, end);
    let block = sys.kernel.view((r.start, r.start), (r.len(), r.len())).into_owned();
    spectral_norm(&block)
}

#[derive(Clone, Copy, Debug)]
pub struct NeumannOptions {
    pub target_norm: f64,
    /// Series stops once a term is below `series_tol·max(1, ‖F‖_∞)`.
    pub series_tol: f64,
    /// Upper bound on the number of nodes per window.
    pub max_window: Option<usize>,
    pub max_terms: usize,
}

impl Default for NeumannOptions {
    fn default() -> Self {
        NeumannOptions { target_norm: 0.5, series_tol: 1e-12, max_window: None, max_terms: 10_000 }
    }
}

/// One window of the stitched solve, nodes `start..=end`.
#[derive(Clone, Debug)]
pub struct Window {
    pub start: usize,
    pub end: usize,
    pub norm: f64,
    pub terms: usize,
}

#[derive(Clone, Debug)]
pub struct NeumannSolution {
    pub v: MeanVector,
    pub windows: Vec<Window>,
}

impl NeumannSolution {
    /// Largest window size in nodes.
    pub fn max_window(&self) -> usize {
        self.windows.iter().map(|w| w.end - w.start + 1).max().unwrap_or(0)
    }
}

/// Solves `V = F + AV` window by window from `T` backwards. Each window is
/// the longest one whose restricted kernel norm stays below the target; the
/// already solved right part enters as an extra source.
pub fn neumann_solve(sys: &VolterraSystem, opts: &NeumannOptions) -> Result<NeumannSolution> {
    let m = sys.grid.steps();
    let mut v = DVector::zeros(sys.dim());
    let mut windows = Vec::new();
    let mut end = m as isize;
    while end >= 0 {
        let e = end as usize;
        let avail = e + 1;
        let cap = opts.max_window.unwrap_or(avail).max(1).min(avail);
        let min_nodes = 2.min(cap);
        let fits = |s: usize| operator_norm_estimate(sys, e + 1 - s, e) <= opts.target_norm;
        if !fits(min_nodes) {
            return Err(Error::Config(format!(
                "no window of {min_nodes} nodes ending at t={} brings the kernel norm below {}; refine the grid or reduce the mean coefficients",
                sys.grid.node(e),
                opts.target_norm
            )));
        }
        let size = if fits(cap) {
            cap
        } else {
            let (mut lo, mut hi) = (min_nodes, cap);
            while hi - lo > 1 {
                let mid = (lo + hi) / 2;
                if fits(mid) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            lo
        };
        let start = e + 1 - size;
        let r = window_range(sys, start, e);
        let block = sys.kernel.view((r.start, r.start), (r.len(), r.len())).into_owned();
        let mut f_eff: DVector<f64> = sys.source.rows(r.start, r.len()).into_owned();
        let right = r.end..sys.dim();
        if !right.is_empty() {
            let coupling = sys.kernel.view((r.start, right.start), (r.len(), right.len()));
            f_eff += coupling * v.rows(right.start, right.len());
        }
        let tol = opts.series_tol * f_eff.amax().max(1.0);
        let mut sum = f_eff.clone();
        let mut term = f_eff;
        // number of series terms actually added
        let mut terms = 1;
        loop {
            term = &block * &term;
            if term.amax() < tol {
                break;
            }
            if terms >= opts.max_terms {
                return Err(Error::NonConvergence { iterations: terms, last_delta: term.amax() });
            }
            sum += &term;
            terms += 1;
        }
        v.rows_mut(r.start, r.len()).copy_from(&sum);
        windows.push(Window { start, end: e, norm: operator_norm_estimate(sys, start, e), terms });
        end = start as isize - 1;
    }
    Ok(NeumannSolution { v: MeanVector { atoms: sys.atoms, values: v }, windows })
}

/// Dense LU solve of `(I − A)V = F` on the whole grid.
pub fn direct_solve(sys: &VolterraSystem) -> Result<MeanVector> {
    let dim = sys.dim();
    let lhs = DMatrix::identity(dim, dim) - &sys.kernel;
    let sol = lhs.lu().solve(&sys.source).ok_or_else(|| Error::Numerical { node: 0, message: "mean system is singular".into() })?;
    if let Some(p) = sol.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical { node: p / sys.width(), message: "direct solve produced a non-finite value".into() });
    }
    Ok(MeanVector { atoms: sys.atoms, values: sol })
}

impl MeanVector {
    /// Wraps raw node-major values.
    pub fn from_values(atoms: usize, values: DVector<f64>) -> Self {
        MeanVector { atoms, values }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linear::gamma::{mean_gamma, simulate_gamma};
    use crate::model::TerminalCondition;
    use crate::paths::{build_grid, simulate_ensemble, Atom, LevyMeasure};
    use crate::profile::{AtomProfile, Profile};

    fn ens(n: usize, steps: usize) -> PathEnsemble {
        let g = build_grid(1.0, steps).unwrap();
        let l = LevyMeasure::new(vec![Atom { mark: 0.5, weight: 1.0 }, Atom { mark: -0.4, weight: 0.5 }]).unwrap();
        simulate_ensemble(&g, &l, n, 31).unwrap()
    }

    fn stochastic(tc: TerminalCondition) -> LinearCoefficients {
        LinearCoefficients {
            alpha1: Profile::Constant(0.2),
            alpha2: Profile::Affine { intercept: 0.3, slope: -0.1 },
            beta1: Profile::Constant(0.3),
            beta2: Profile::Constant(0.25),
            eta1: AtomProfile::Uniform(Profile::Constant(0.2)),
            eta2: AtomProfile::PerAtom(vec![Profile::Constant(0.4), Profile::Constant(-0.3)]),
            gamma: Profile::Constant(0.5),
            terminal: tc,
        }
    }

    fn system(c: &LinearCoefficients, e: &PathEnsemble, form: SystemForm) -> VolterraSystem {
        let g = simulate_gamma(c, e).unwrap();
        assemble_system(c, e, &g, None, form).unwrap()
    }

    #[test]
    fn zero_mean_coefficients_give_zero_kernel_and_plain_source() {
        let e = ens(200, 10);
        let mut c = LinearCoefficients::zero(TerminalCondition::Constant(1.5));
        c.alpha1 = Profile::Constant(0.4);
        let sys = system(&c, &e, SystemForm::Derived);
        assert_eq!(sys.kernel.amax(), 0.0);
        for i in 0..=10 {
            let expect = 1.5 * mean_gamma(&c.alpha1, e.grid(), i, 10);
            assert!((sys.source[sys.index(i, Component::Y)] - expect).abs() < 1e-14);
            assert_eq!(sys.source[sys.index(i, Component::Z)], 0.0);
            assert_eq!(sys.source[sys.index(i, Component::K(1))], 0.0);
        }
        let sol = neumann_solve(&sys, &NeumannOptions::default()).unwrap();
        assert!(sol.windows.iter().all(|w| w.terms == 1));
        assert_eq!(sol.v.values, sys.source);
        assert_eq!(direct_solve(&sys).unwrap().values, sys.source);
    }

    #[test]
    fn brownian_source_matches_mean_gamma() {
        let e = ens(20_000, 10);
        let mut c = LinearCoefficients::zero(TerminalCondition::BrownianLinear { a: 1.0, b: 0.0 });
        c.alpha1 = Profile::Constant(0.3);
        c.eta1 = AtomProfile::Uniform(Profile::Constant(0.4));
        let sys = system(&c, &e, SystemForm::Derived);
        for i in [0, 4, 9] {
            let k = sys.index(i, Component::Z);
            let expect = mean_gamma(&c.alpha1, e.grid(), i, 10);
            assert!((sys.source[k] - expect).abs() < 3.0 * sys.source_se[k], "node {i}");
        }
    }

    #[test]
    fn kernel_is_causal() {
        let e = ens(100, 8);
        let sys = system(&stochastic(TerminalCondition::Constant(1.0)), &e, SystemForm::Published);
        let w = sys.width();
        for r in 0..sys.dim() {
            for c in 0..sys.dim() {
                if c / w < r / w || r / w == 8 {
                    assert_eq!(sys.kernel[(r, c)], 0.0);
                }
            }
        }
    }

    #[test]
    fn norm_estimate_matches_singular_values_and_grows_with_window() {
        let e = ens(100, 40);
        let mut c = LinearCoefficients::zero(TerminalCondition::Constant(1.0));
        c.alpha2 = Profile::Constant(1.0);
        c.alpha1 = Profile::Constant(0.2);
        let sys = system(&c, &e, SystemForm::Derived);
        let mut last = 0.0;
        for start in (0..40).rev().step_by(7) {
            let est = operator_norm_estimate(&sys, start, 40);
            let r = start * sys.width()..41 * sys.width();
            let block = sys.kernel.view((r.start, r.start), (r.len(), r.len())).into_owned();
            let svd = block.singular_values().max();
            assert!((est - svd).abs() <= 1e-8 * svd.max(1.0), "{est} vs {svd}");
            assert!(est >= last);
            last = est;
        }
        let zero = system(&LinearCoefficients::zero(TerminalCondition::Constant(1.0)), &e, SystemForm::Derived);
        assert_eq!(operator_norm_estimate(&zero, 0, 40), 0.0);
    }

    #[test]
    fn neumann_agrees_with_direct_solve() {
        let e = ens(2000, 30);
        for form in [SystemForm::Derived, SystemForm::Published] {
            let mut c = stochastic(TerminalCondition::BrownianLinear { a: 1.0, b: 0.5 });
            c.alpha2 = Profile::Constant(3.0);
            let sys = system(&c, &e, form);
            let n = neumann_solve(&sys, &NeumannOptions::default()).unwrap();
            assert!(n.windows.len() > 1, "test needs several windows");
            let d = direct_solve(&sys).unwrap();
            assert!(n.v.max_abs_diff(&d) <= 1e-10);
            let half = NeumannOptions { max_window: Some((n.max_window() / 2).max(2)), ..Default::default() };
            let h = neumann_solve(&sys, &half).unwrap();
            assert!(h.v.max_abs_diff(&n.v) <= 1e-8);
        }
    }

    #[test]
    fn deterministic_mean_matches_exponential() {
        let e = ens(10, 100);
        let mut c = LinearCoefficients::zero(TerminalCondition::Constant(2.0));
        c.alpha1 = Profile::Constant(0.1);
        c.alpha2 = Profile::Constant(0.2);
        let sys = system(&c, &e, SystemForm::Derived);
        let v = neumann_solve(&sys, &NeumannOptions::default()).unwrap().v;
        assert!((v.y(0) - 2.0 * 0.3f64.exp()).abs() < 1e-3);
    }

    #[test]
    fn scalar_coupling_matches_back_substitution() {
        let e = ens(500, 25);
        let mut c = LinearCoefficients::zero(TerminalCondition::SmoothOfBrownian { phi: crate::profile::ScalarFn::Sin { offset: 0.0, amplitude: 1.0, frequency: 1.0 } });
        c.alpha1 = Profile::Constant(-0.2);
        c.alpha2 = Profile::Exponential { scale: 0.8, rate: 0.5 };
        c.beta1 = Profile::Constant(0.3);
        let sys = system(&c, &e, SystemForm::Derived);
        let (m, dt, w) = (25, e.grid().dt(), sys.width());
        let eg = crate::linear::gamma::MeanGamma::new(&c.alpha1, e.grid());
        let mut y = vec![0.0; m + 1];
        for i in (0..=m).rev() {
            let mut rhs = sys.source[i * w];
            for l in i + 1..=m {
                rhs += quad_weight(i, l, m, dt) * eg.value(i, l) * c.alpha2.value(e.grid().node(l)) * y[l];
            }
            y[i] = rhs / (1.0 - quad_weight(i, i, m, dt) * c.alpha2.value(e.grid().node(i)));
        }
        let n = neumann_solve(&sys, &NeumannOptions::default()).unwrap().v;
        for i in 0..=m {
            assert!((n.y(i) - y[i]).abs() <= 1e-12 * y[i].abs().max(1.0), "node {i}");
        }
    }

    #[test]
    fn unreachable_norm_target_is_a_config_error() {
        let e = ens(10, 4);
        let mut c = LinearCoefficients::zero(TerminalCondition::Constant(1.0));
        c.alpha2 = Profile::Constant(50.0);
        let sys = system(&c, &e, SystemForm::Derived);
        assert!(matches!(neumann_solve(&sys, &NeumannOptions::default()), Err(Error::Config(_))));
    }
}
