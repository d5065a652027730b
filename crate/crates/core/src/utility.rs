//! Mean-field recursive utility: wealth, adjoints, the candidate optimal
//! consumption and utility evaluation.

use std::sync::Arc;

use log::{info, warn};

use crate::error::{Error, Result};
use crate::linear::{solve_linear, Estimate, LinearOptions};
use crate::model::{LinearCoefficients, LinearDriver, MeanFunctional, PathwiseGamma, PreparedTerminal, TerminalCondition, WealthModel};
use crate::paths::{PathEnsemble, PathView};
use crate::picard::{picard_full_freeze, ConditionalExpectation, PicardSettings, RegressionBasis};
use crate::profile::{AtomProfile, Profile};
use crate::stats;

/// Coefficients of the geometric wealth dynamics
/// `dX = (b₀ − π)X dt + σ₀X dB + ∫γ₀X Ñ(dt, dζ)`.
#[derive(Clone, Debug)]
pub struct WealthParams {
    pub x0: f64,
    pub b0: Profile,
    pub sigma0: Profile,
    pub gamma0: AtomProfile,
}

impl WealthParams {
    pub fn constant(x0: f64, b0: f64, sigma0: f64, gamma0: f64) -> Self {
        WealthParams { x0, b0: b0.into(), sigma0: sigma0.into(), gamma0: gamma0.into() }
    }

    pub fn validate(&self, ens: &PathEnsemble) -> Result<()> {
        if !(self.x0 > 0.0 && self.x0.is_finite()) {
            return Err(Error::Domain(format!("initial wealth must be positive, got {}", self.x0)));
        }
        let grid = ens.grid();
        for i in 0..=grid.steps() {
            let t = grid.node(i);
            for (j, a) in ens.levy().atoms().iter().enumerate() {
                let g = self.gamma0.value(t, j, a.mark);
                if !(g > -1.0) {
                    return Err(Error::Domain(format!("gamma0(t={t}, ζ={}) = {g} must exceed -1", a.mark)));
                }
            }
        }
        Ok(())
    }
}

/// Consumption rate per node (deterministic) or per node and path.
#[derive(Clone, Debug)]
pub enum ControlProcess {
    /// `π(t_i)`, one value per node.
    Deterministic(Vec<f64>),
    /// `π[i * n_paths + n]`.
    Adapted { n_paths: usize, values: Vec<f64> },
}

impl ControlProcess {
    pub fn constant(value: f64, steps: usize) -> Self {
        ControlProcess::Deterministic(vec![value; steps + 1])
    }

    pub fn value(&self, i: usize, n: usize) -> f64 {
        match self {
            ControlProcess::Deterministic(v) => v[i],
            ControlProcess::Adapted { n_paths, values } => values[i * n_paths + n],
        }
    }

    pub fn validate(&self, ens: &PathEnsemble) -> Result<()> {
        let nodes = ens.grid().steps() + 1;
        let ok_len = match self {
            ControlProcess::Deterministic(v) => v.len() == nodes,
            ControlProcess::Adapted { n_paths, values } => *n_paths == ens.n_paths() && values.len() == nodes * n_paths,
        };
        if !ok_len {
            return Err(Error::Domain("control does not match the ensemble shape".into()));
        }
        let vals = match self {
            ControlProcess::Deterministic(v) => v,
            ControlProcess::Adapted { values, .. } => values,
        };
        if let Some(p) = vals.iter().position(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Domain(format!("consumption rate must be finite and non-negative (entry {p})")));
        }
        Ok(())
    }

    /// Pointwise product with a per-node factor.
    pub fn scaled(&self, factor: &[f64]) -> ControlProcess {
        match self {
            ControlProcess::Deterministic(v) => {
                ControlProcess::Deterministic(v.iter().zip(factor).map(|(a, b)| a * b).collect())
            }
            ControlProcess::Adapted { n_paths, values } => ControlProcess::Adapted {
                n_paths: *n_paths,
                values: values.iter().enumerate().map(|(idx, v)| v * factor[idx / n_paths]).collect(),
            },
        }
    }
}

/// Wealth per node and path, node-major `(M+1) × n_paths`.
#[derive(Clone, Debug)]
pub struct WealthGrid {
    n_paths: usize,
    pub values: Vec<f64>,
}

impl WealthGrid {
    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn at(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_paths..(i + 1) * self.n_paths]
    }
}

/// Per-step constant part of the log-wealth increment and the jump logs.
fn wealth_step(wp: &WealthParams, ens: &PathEnsemble, i: usize) -> (f64, f64, Vec<f64>) {
    let grid = ens.grid();
    let t = grid.node(i);
    let dt = grid.dt();
    let s = wp.sigma0.value(t);
    let mut drift = (wp.b0.value(t) - 0.5 * s * s) * dt;
    let mut logs = Vec::with_capacity(ens.atoms());
    for (j, a) in ens.levy().atoms().iter().enumerate() {
        let g = wp.gamma0.value(t, j, a.mark);
        drift -= g * a.weight * dt;
        logs.push((1.0 + g).ln());
    }
    (drift, s, logs)
}

/// Geometric closed form with coefficients frozen at the left endpoint of
/// each step.
pub fn simulate_wealth(wp: &WealthParams, pi: &ControlProcess, ens: &PathEnsemble) -> Result<WealthGrid> {
    wp.validate(ens)?;
    pi.validate(ens)?;
    let np = ens.n_paths();
    let m = ens.grid().steps();
    let dt = ens.grid().dt();
    let mut values = vec![0.0; (m + 1) * np];
    let mut log_x = vec![wp.x0.ln(); np];
    values[..np].iter_mut().for_each(|v| *v = wp.x0);
    for i in 0..m {
        let (drift, s, logs) = wealth_step(wp, ens, i);
        let db = ens.db(i);
        let out = &mut values[(i + 1) * np..(i + 2) * np];
        for n in 0..np {
            let mut inc = drift - pi.value(i, n) * dt + s * db[n];
            for (j, l) in logs.iter().enumerate() {
                inc += l * ens.counts(i, j)[n] as f64;
            }
            log_x[n] += inc;
            out[n] = log_x[n].exp();
        }
    }
    Ok(WealthGrid { n_paths: np, values })
}

/// `X(T)` on a single path.
pub fn wealth_terminal_path(wp: &WealthParams, pi: &ControlProcess, path: PathView<'_>) -> Result<f64> {
    wp.validate(path.ens)?;
    pi.validate(path.ens)?;
    let dt = path.ens.grid().dt();
    let mut log_x = wp.x0.ln();
    for i in 0..path.ens.grid().steps() {
        let (drift, s, logs) = wealth_step(wp, path.ens, i);
        log_x += drift - pi.value(i, path.n) * dt + s * path.db(i);
        for (j, l) in logs.iter().enumerate() {
            log_x += l * path.count(i, j) as f64;
        }
    }
    Ok(log_x.exp())
}


/// Coefficients of the recursive-utility equation
/// `−dY = [α₀Y + α₁E[Y] + β₀Z + β₁E[Z] + Σ_j (η₀K_j + η₁E[K_j]) w_j + ln(πX)] dt − Z dB − ∫K dÑ`
/// with `Y(T) = θX(T)`.
#[derive(Clone, Debug)]
pub struct UtilityCoefficients {
    pub alpha0: Profile,
    pub alpha1: Profile,
    pub beta0: Profile,
    pub beta1: Profile,
    pub eta0: AtomProfile,
    pub eta1: AtomProfile,
    /// Positive terminal factor, a constant or a function of `B(T)`.
    pub theta: TerminalCondition,
}

impl UtilityCoefficients {
    pub fn zero(theta: TerminalCondition) -> Self {
        UtilityCoefficients {
            alpha0: Profile::default(),
            alpha1: Profile::default(),
            beta0: Profile::default(),
            beta1: Profile::default(),
            eta0: AtomProfile::default(),
            eta1: AtomProfile::default(),
            theta,
        }
    }

    /// `η₀ > −1` (the adjoint divides by `1 + η₀`), `η₁ ≥ −1`, θ of the
    /// admitted kinds and strictly positive on the ensemble.
    pub fn validate(&self, ens: &PathEnsemble) -> Result<()> {
        let grid = ens.grid();
        for i in 0..=grid.steps() {
            let t = grid.node(i);
            for (j, a) in ens.levy().atoms().iter().enumerate() {
                let e0 = self.eta0.value(t, j, a.mark);
                let e1 = self.eta1.value(t, j, a.mark);
                if !(e0 > -1.0) {
                    return Err(Error::Domain(format!("eta0(t={t}, ζ={}) = {e0} must exceed -1", a.mark)));
                }
                if !(e1 >= -1.0) {
                    return Err(Error::Domain(format!("eta1(t={t}, ζ={}) = {e1} must be at least -1", a.mark)));
                }
            }
        }
        match &self.theta {
            TerminalCondition::Constant(_) | TerminalCondition::SmoothOfBrownian { .. } => {}
            other => {
                return Err(Error::Capability(format!(
                    "the utility factor θ must be a constant or a function of B(T), got {}",
                    other.kind()
                )))
            }
        }
        let theta = PreparedTerminal::new(&self.theta, ens)?.values;
        if let Some(n) = theta.iter().position(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Domain(format!("θ must be positive, got {} on path {n}", theta[n])));
        }
        Ok(())
    }

    fn has_mean_zk(&self) -> bool {
        !self.beta1.is_zero() || !self.eta1.is_zero()
    }

    /// The same equation in the linear-engine parametrization with terminal
    /// value `θX(T)`.
    pub fn linear_coefficients(&self, wealth: Arc<WealthModel>) -> LinearCoefficients {
        LinearCoefficients {
            alpha1: self.alpha0.clone(),
            alpha2: self.alpha1.clone(),
            beta1: self.beta0.clone(),
            beta2: self.beta1.clone(),
            eta1: self.eta0.clone(),
            eta2: self.eta1.clone(),
            gamma: Profile::default(),
            terminal: TerminalCondition::WealthLinear { theta: Box::new(self.theta.clone()), wealth },
        }
    }
}

/// `p(t_i) = E[θ | F_{t_i}]`; exact for constant θ, regression otherwise.
/// `p(T) = θ` holds exactly. Fitted values are clamped to the sample range
/// of θ, which contains every conditional expectation of θ; polynomial
/// features can otherwise extrapolate past it on extreme paths.
pub fn adjoint_p(theta: &TerminalCondition, ens: &PathEnsemble, basis: &RegressionBasis) -> Result<Vec<f64>> {
    let np = ens.n_paths();
    let m = ens.grid().steps();
    let values = PreparedTerminal::new(theta, ens)?.values;
    let mut p = vec![0.0; (m + 1) * np];
    if let TerminalCondition::Constant(c) = theta {
        p.iter_mut().for_each(|v| *v = *c);
        return Ok(p);
    }
    p[m * np..].copy_from_slice(&values);
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ce = ConditionalExpectation::new(ens, basis.clone());
    let mut clamped = 0usize;
    for i in 0..m {
        let fit = ce.fit(i, &[&values])?.pop().unwrap_or_default();
        for (dst, v) in p[i * np..(i + 1) * np].iter_mut().zip(fit) {
            clamped += usize::from(v < lo || v > hi);
            *dst = v.clamp(lo, hi);
        }
    }
    if clamped > 0 {
        info!("{clamped} regression values of p clamped to the range of θ");
    }
    Ok(p)
}

/// Forward adjoint `λ` with its integrating factor.
#[derive(Clone, Debug)]
pub struct LambdaState {
    pub n_paths: usize,
    /// `λ(t_i)` per path, node-major.
    pub lambda: Vec<f64>,
    /// `Υ(t_i)` per path, node-major.
    pub upsilon: Vec<f64>,
    /// `E[λ(t_i)] = exp ∫_0^{t_i} (α₀ + α₁)`.
    pub mean_lambda: Vec<f64>,
    /// `max_i E|λ(t_i) − λ^{Euler}(t_i)|²`.
    pub euler_residual: f64,
}

impl LambdaState {
    pub fn lambda_at(&self, i: usize) -> &[f64] {
        &self.lambda[i * self.n_paths..(i + 1) * self.n_paths]
    }
}

/// `λ` by variation of constants: `λ = Υ⁻¹ u` with `Υ` the reciprocal of
/// the stochastic exponential of `(α₀, β₀, η₀)` and
/// `du = ΥE[λ]{(α₁ − β₀β₁ − Σ_j η₀η₁w_j/(1+η₀)) dt + β₁ dB + Σ_j η₁/(1+η₀) dÑ_j}`.
/// Stochastic integrals use left endpoints. An Euler scheme on the forward
/// equation is run alongside as a residual check.
pub fn adjoint_lambda(uc: &UtilityCoefficients, ens: &PathEnsemble) -> Result<LambdaState> {
    uc.validate(ens)?;
    let grid = ens.grid();
    let np = ens.n_paths();
    let m = grid.steps();
    let dt = grid.dt();
    let atoms = ens.levy().atoms();
    let mut cum = vec![0.0; m + 1];
    for i in 0..m {
        let (a, b) = (grid.node(i), grid.node(i + 1));
        let f = |t: f64| uc.alpha0.value(t) + uc.alpha1.value(t);
        cum[i + 1] = cum[i] + 0.5 * dt * (f(a) + f(b));
    }
    let mean_lambda: Vec<f64> = cum.iter().map(|c| c.exp()).collect();

    let mut log_ups = vec![0.0f64; np];
    let mut u = vec![1.0; np];
    let mut euler = vec![1.0; np];
    let mut lambda = vec![1.0; (m + 1) * np];
    let mut upsilon = vec![1.0; (m + 1) * np];
    let mut residual: f64 = 0.0;
    for i in 0..m {
        let t = grid.node(i);
        let (a0, a1, b0, b1) = (uc.alpha0.value(t), uc.alpha1.value(t), uc.beta0.value(t), uc.beta1.value(t));
        let el = mean_lambda[i];
        let mut ups_drift = -a0 + 0.5 * b0 * b0;
        let mut u_drift = a1 - b0 * b1;
        let mut e0 = Vec::with_capacity(atoms.len());
        let mut e1 = Vec::with_capacity(atoms.len());
        for (j, at) in atoms.iter().enumerate() {
            let (x0, x1) = (uc.eta0.value(t, j, at.mark), uc.eta1.value(t, j, at.mark));
            ups_drift -= ((1.0 + x0).ln() - x0) * at.weight;
            u_drift -= x0 * x1 / (1.0 + x0) * at.weight;
            e0.push(x0);
            e1.push(x1);
        }
        let db = ens.db(i);
        for n in 0..np {
            let ups = log_ups[n].exp();
            let mut du = u_drift * dt + b1 * db[n];
            let mut dl = ups_drift * dt - b0 * db[n];
            let lam = euler[n];
            let mut de = (a0 * lam + a1 * el) * dt + (b0 * lam + b1 * el) * db[n];
            for j in 0..e0.len() {
                let dn = ens.dn_p(i, j, n);
                du += e1[j] / (1.0 + e0[j]) * dn;
                dl -= (1.0 + e0[j]).ln() * dn;
                de += (e0[j] * lam + e1[j] * el) * dn;
            }
            u[n] += ups * el * du;
            log_ups[n] += dl;
            euler[n] += de;
            let ups_next = log_ups[n].exp();
            upsilon[(i + 1) * np + n] = ups_next;
            lambda[(i + 1) * np + n] = u[n] / ups_next;
        }
        let ms = stats::chunked_sum(np, |n| (lambda[(i + 1) * np + n] - euler[n]).powi(2)) / np as f64;
        residual = residual.max(ms);
    }
    Ok(LambdaState { n_paths: np, lambda, upsilon, mean_lambda, euler_residual: residual })
}

/// Floor applied to `p` before dividing.
pub const P_FLOOR: f64 = 1e-8;

/// `π̂ = λ / max(p, ε_p)`; returns the control and the number of clipped
/// entries. A deterministic `λ` and `p` give a deterministic control. The
/// candidate is undefined where `λ ≤ 0`, which is reported as a domain error.
pub fn optimal_pi(lambda: &LambdaState, p: &[f64]) -> Result<(ControlProcess, usize)> {
    let np = lambda.n_paths;
    let bad = lambda.lambda.iter().filter(|&&l| !(l > 0.0)).count();
    if bad > 0 {
        return Err(Error::Domain(format!(
            "λ is not positive on {bad} of {} entries, so ln π has no maximizer there; \
             choose coefficients that keep λ positive (for example beta1 = 0 and eta1 ≥ 0)",
            lambda.lambda.len()
        )));
    }
    let mut clipped = 0;
    let values: Vec<f64> = lambda
        .lambda
        .iter()
        .zip(p)
        .map(|(l, &pv)| {
            if pv < P_FLOOR {
                clipped += 1;
            }
            l / pv.max(P_FLOOR)
        })
        .collect();
    if clipped > 0 {
        warn!("p fell below {P_FLOOR} on {clipped} entries; clipped before computing the control");
    }
    let nodes = values.len() / np;
    let deterministic = (0..nodes).all(|i| values[i * np..(i + 1) * np].iter().all(|&v| v == values[i * np]));
    let control = if deterministic {
        ControlProcess::Deterministic((0..nodes).map(|i| values[i * np]).collect())
    } else {
        ControlProcess::Adapted { n_paths: np, values }
    };
    Ok((control, clipped))
}

/// Arguments of the Hamiltonian at one point.
#[derive(Clone, Debug)]
pub struct HamiltonianPoint<'a> {
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub k: &'a [f64],
    pub ybar: f64,
    pub zbar: f64,
    pub kbar: &'a [f64],
    pub pi: f64,
    pub p: f64,
    pub q: f64,
    pub r: &'a [f64],
    pub lambda: f64,
}

/// `H = (b₀−π)xp + σ₀xq + Σ_j γ₀x r_j w_j + λ[α₀y + α₁ȳ + β₀z + β₁z̄ + Σ_j (η₀k_j + η₁k̄_j)w_j + ln π + ln x]`.
pub fn hamiltonian(wp: &WealthParams, uc: &UtilityCoefficients, ens: &PathEnsemble, h: &HamiltonianPoint<'_>) -> Result<f64> {
    if !(h.pi > 0.0) || !(h.x > 0.0) {
        return Err(Error::Domain(format!("the Hamiltonian needs π > 0 and x > 0, got π = {}, x = {}", h.pi, h.x)));
    }
    let t = h.t;
    let mut wealth = (wp.b0.value(t) - h.pi) * h.x * h.p + wp.sigma0.value(t) * h.x * h.q;
    let mut util = uc.alpha0.value(t) * h.y + uc.alpha1.value(t) * h.ybar + uc.beta0.value(t) * h.z + uc.beta1.value(t) * h.zbar;
    for (j, a) in ens.levy().atoms().iter().enumerate() {
        wealth += wp.gamma0.value(t, j, a.mark) * h.x * h.r[j] * a.weight;
        util += (uc.eta0.value(t, j, a.mark) * h.k[j] + uc.eta1.value(t, j, a.mark) * h.kbar[j]) * a.weight;
    }
    Ok(wealth + h.lambda * (util + h.pi.ln() + h.x.ln()))
}

/// `∂H/∂π = −p + λ/π` in the normalization where the wealth factor of the
/// consumption term is absorbed; agrees with the literal derivative
/// `−xp + λ/π` at `x = 1`.
pub fn dh_dpi(x: f64, pi: f64, p: f64, lambda: f64) -> Result<f64> {
    if !(pi > 0.0) || !(x > 0.0) {
        return Err(Error::Domain(format!("∂H/∂π needs π > 0 and x > 0, got π = {pi}, x = {x}")));
    }
    Ok(-p + lambda / pi)
}

/// Adjoint processes and the candidate control for one scenario.
#[derive(Clone, Debug)]
pub struct AdjointState {
    pub p: Vec<f64>,
    pub lambda: LambdaState,
    pub pi_hat: ControlProcess,
    pub clipped: usize,
}

pub fn adjoint_state(uc: &UtilityCoefficients, ens: &PathEnsemble, basis: &RegressionBasis) -> Result<AdjointState> {
    let lambda = adjoint_lambda(uc, ens)?;
    let p = adjoint_p(&uc.theta, ens, basis)?;
    let (pi_hat, clipped) = optimal_pi(&lambda, &p)?;
    Ok(AdjointState { p, lambda, pi_hat, clipped })
}

/// `ln(π X)` per node and path with the Malliavin derivatives of `ln X`
/// when `π` is deterministic.
fn log_consumption(wp: &WealthParams, pi: &ControlProcess, wealth: &WealthGrid, ens: &PathEnsemble) -> Result<PathwiseGamma> {
    let grid = ens.grid();
    let np = ens.n_paths();
    let m = grid.steps();
    let mut values = vec![0.0; (m + 1) * np];
    for i in 0..=m {
        let x = wealth.at(i);
        for n in 0..np {
            let c = pi.value(i, n);
            if !(c > 0.0) {
                return Err(Error::Domain(format!("ln(πX) needs π > 0; π = {c} at t = {}", grid.node(i))));
            }
            values[i * np + n] = c.ln() + x[n].ln();
        }
    }
    let (d_brownian, d_jump) = match pi {
        ControlProcess::Deterministic(_) => {
            let db: Vec<f64> = (0..=m).map(|i| wp.sigma0.value(grid.node(i))).collect();
            let mut dj = Vec::with_capacity((m + 1) * ens.atoms());
            for i in 0..=m {
                for (j, a) in ens.levy().atoms().iter().enumerate() {
                    dj.push((1.0 + wp.gamma0.value(grid.node(i), j, a.mark)).ln());
                }
            }
            (Some(db), Some(dj))
        }
        ControlProcess::Adapted { .. } => (None, None),
    };
    Ok(PathwiseGamma { n_paths: np, values, d_brownian, d_jump })
}

/// Route used to evaluate `J(π) = Y(0)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum JRoute {
    /// Mean system with `Γ` Monte Carlo.
    MeanSystem,
    /// `E[λ(T)θX(T) + ∫λ ln(πX) dt]` with the forward adjoint.
    Duality,
    /// Full-freeze Picard solve with wealth features in the basis.
    Picard,
}

/// `J(π) = Y(0)` with its standard error.
pub fn evaluate_j(
    wp: &WealthParams,
    uc: &UtilityCoefficients,
    pi: &ControlProcess,
    ens: &PathEnsemble,
    route: JRoute,
) -> Result<Estimate> {
    uc.validate(ens)?;
    let wealth = Arc::new(simulate_wealth(wp, pi, ens)?);
    let gamma = log_consumption(wp, pi, &wealth, ens)?;
    let model = Arc::new(WealthModel { params: wp.clone(), control: pi.clone() });
    let coeffs = uc.linear_coefficients(model);
    match route {
        JRoute::MeanSystem => {
            if matches!(pi, ControlProcess::Adapted { .. }) && uc.has_mean_zk() {
                return Err(Error::Capability(
                    "an adapted control with mean-Z or mean-K coefficients needs the Picard or duality route".into(),
                ));
            }
            let sol = solve_linear(&coeffs, ens, Some(Arc::new(gamma)), &LinearOptions::default())?;
            Ok(Estimate { value: sol.closed.y0, se: sol.closed.y0_se })
        }
        JRoute::Duality => {
            let lam = adjoint_lambda(uc, ens)?;
            let xi = PreparedTerminal::new(&coeffs.terminal, ens)?.values;
            let grid = ens.grid();
            let (m, dt, np) = (grid.steps(), grid.dt(), ens.n_paths());
            let sample: Vec<f64> = (0..np)
                .map(|n| {
                    let mut s = lam.lambda[m * np + n] * xi[n];
                    for i in 0..=m {
                        let w = if i == 0 || i == m { 0.5 * dt } else { dt };
                        s += w * lam.lambda[i * np + n] * gamma.values[i * np + n];
                    }
                    s
                })
                .collect();
            let (value, se) = stats::mean_se(&sample);
            Ok(Estimate { value, se })
        }
        JRoute::Picard => {
            let driver = LinearDriver::new(coeffs.clone(), ens.grid(), ens.levy()).with_pathwise_gamma(Arc::new(gamma));
            let settings = PicardSettings { basis: RegressionBasis::default().with_wealth(wealth), ..Default::default() };
            let (_, rep) = picard_full_freeze(&driver, MeanFunctional::Full, &coeffs.terminal, ens, &settings)?;
            Ok(Estimate { value: rep.y0, se: rep.y0_se })
        }
    }
}

/// One perturbed control and its utility gap to the candidate.
#[derive(Clone, Debug)]
pub struct Perturbation {
    pub label: String,
    pub j: Estimate,
    /// `J(π̂) − J(π)`
    pub gap: f64,
    /// `sqrt(se(π̂)² + se(π)²)`
    pub combined_se: f64,
    /// `gap ≥ −3·combined_se`
    pub dominated: bool,
}

/// The perturbation family: ten multiplicative rescalings of the whole path
/// and ten ±20% bumps on the five fifths of `[0, T]`.
pub fn perturbation_family(steps: usize) -> Vec<(String, Vec<f64>)> {
    let nodes = steps + 1;
    let mut out = Vec::with_capacity(20);
    for f in [0.8, 0.85, 0.9, 0.95, 0.98, 1.02, 1.05, 1.1, 1.15, 1.2] {
        out.push((format!("scale {f}"), vec![f; nodes]));
    }
    for w in 0..5 {
        for f in [0.8, 1.2] {
            let factors: Vec<f64> = (0..nodes)
                .map(|i| {
                    let pos = i * 5 / nodes;
                    if pos == w {
                        f
                    } else {
                        1.0
                    }
                })
                .collect();
            out.push((format!("window {w}/5 x{f}"), factors));
        }
    }
    out
}

/// Evaluates `J` at the candidate and along the perturbation family.
pub fn optimality_scan(
    wp: &WealthParams,
    uc: &UtilityCoefficients,
    pi_hat: &ControlProcess,
    ens: &PathEnsemble,
    route: JRoute,
) -> Result<(Estimate, Vec<Perturbation>)> {
    let base = evaluate_j(wp, uc, pi_hat, ens, route)?;
    let mut out = Vec::new();
    for (label, factors) in perturbation_family(ens.grid().steps()) {
        let j = evaluate_j(wp, uc, &pi_hat.scaled(&factors), ens, route)?;
        let gap = base.value - j.value;
        let combined_se = base.se.hypot(j.se);
        out.push(Perturbation { label, j, gap, combined_se, dominated: gap >= -3.0 * combined_se });
    }
    Ok((base, out))
}
