use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{beta_norm, Driver, MeanFunctional, PreparedTerminal, SolutionGrid, TerminalCondition};
use crate::paths::PathEnsemble;
use crate::picard::regression::{ConditionalExpectation, RegressionBasis};
use crate::picard::solver::{evaluate_driver, sweep_full};

/// `β = 1 + 12·max(C, C′)²`.
pub fn default_beta(lipschitz: f64, mean_bound: f64) -> f64 {
    let c = lipschitz.max(mean_bound);
    1.0 + 12.0 * c * c
}

#[derive(Clone, Debug)]
pub struct ContractionReport {
    pub beta: f64,
    /// `‖Φ(U) − Φ(V)‖²_β / ‖U − V‖²_β` per pair; 0 for identical inputs.
    pub ratios: Vec<f64>,
    pub max_ratio: f64,
}

/// Random adapted triplet built from low-order polynomials in `(t, B, Ñ)`.
fn random_input(ens: &PathEnsemble, rng: &mut ChaCha8Rng, scale: f64) -> SolutionGrid {
    let grid = ens.grid();
    let np = ens.n_paths();
    let atoms = ens.atoms();
    let mut sol = SolutionGrid::zeros(grid, &ens.levy().weights(), np);
    let coeffs = |rng: &mut ChaCha8Rng| -> [f64; 5] {
        let mut c = [0.0; 5];
        c.iter_mut().for_each(|v| *v = scale * rng.random_range(-1.0..1.0));
        c
    };
    let cy = coeffs(rng);
    let cz = coeffs(rng);
    let ck: Vec<[f64; 5]> = (0..atoms).map(|_| coeffs(rng)).collect();
    let poly = |c: &[f64; 5], t: f64, b: f64, nt: f64| c[0] + c[1] * t + c[2] * b + c[3] * b * b / (1.0 + t) + c[4] * nt;
    for i in 0..=grid.steps() {
        let t = grid.node(i);
        let b = ens.brownian(i).to_vec();
        let jumps: Vec<f64> = (0..np).map(|n| (0..atoms).map(|j| ens.compensated(i, j)[n]).sum()).collect();
        for (n, v) in sol.y_at_mut(i).iter_mut().enumerate() {
            *v = poly(&cy, t, b[n], jumps[n]);
        }
        for (n, v) in sol.z_at_mut(i).iter_mut().enumerate() {
            *v = poly(&cz, t, b[n], jumps[n]);
        }
        for (j, c) in ck.iter().enumerate() {
            for (n, v) in sol.k_at_mut(i, j).iter_mut().enumerate() {
                *v = poly(c, t, b[n], jumps[n]);
            }
        }
    }
    sol.refresh_means();
    sol
}

/// Applies the full-freeze map `Φ` to an arbitrary input triplet.
pub fn apply_map(
    driver: &dyn Driver,
    phi: MeanFunctional,
    xi: &[f64],
    ce: &ConditionalExpectation<'_>,
    input: &SolutionGrid,
) -> Result<SolutionGrid> {
    let f = evaluate_driver(driver, phi, input);
    sweep_full(&f, xi, ce)
}

/// Empirical contraction ratios of `Φ` in the β-norm over random input pairs.
/// With `beta = None` the default weight from the driver constants is used.
#[allow(clippy::too_many_arguments)]
pub fn contraction_check(
    driver: &dyn Driver,
    phi: MeanFunctional,
    tc: &TerminalCondition,
    ens: &PathEnsemble,
    basis: &RegressionBasis,
    beta: Option<f64>,
    pairs: usize,
    seed: u64,
) -> Result<ContractionReport> {
    let xi = PreparedTerminal::new(tc, ens)?.values;
    let weights = ens.levy().weights();
    let beta = beta.unwrap_or_else(|| default_beta(driver.lipschitz(), phi.derivative_bound(&weights, 5.0)));
    let ce = ConditionalExpectation::new(ens, basis.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ratios = Vec::with_capacity(pairs);
    for _ in 0..pairs {
        let u = random_input(ens, &mut rng, 1.0);
        let v = random_input(ens, &mut rng, 1.0);
        ratios.push(pair_ratio(driver, phi, &xi, &ce, &u, &v, beta)?);
    }
    let max_ratio = ratios.iter().copied().fold(0.0, f64::max);
    Ok(ContractionReport { beta, ratios, max_ratio })
}

/// `‖Φ(u) − Φ(v)‖²_β / ‖u − v‖²_β`, defined as 0 when the inputs coincide.
pub fn pair_ratio(
    driver: &dyn Driver,
    phi: MeanFunctional,
    xi: &[f64],
    ce: &ConditionalExpectation<'_>,
    u: &SolutionGrid,
    v: &SolutionGrid,
    beta: f64,
) -> Result<f64> {
    let denom = beta_norm(&u.difference(v), beta);
    if denom == 0.0 {
        return Ok(0.0);
    }
    let pu = apply_map(driver, phi, xi, ce, u)?;
    let pv = apply_map(driver, phi, xi, ce, v)?;
    Ok(beta_norm(&pu.difference(&pv), beta) / denom)
}

/// Comparison of Picard differences with `c·Tⁿe^{CnT}/n!`.
#[derive(Clone, Debug)]
pub struct EnvelopeFit {
    /// Constant anchored at `n = 1`: `c = δ_1 / (T e^{CT})`.
    pub c: f64,
    /// `(n, δ_n, c·Tⁿe^{CnT}/n!)` for every checked `n ≥ 2`.
    pub checked: Vec<(usize, f64, f64)>,
    /// `δ_n` stays below the envelope for every checked `n`.
    pub holds: bool,
    /// Successive ratios `δ_{n+1}/δ_n` strictly decrease over the checked range.
    pub super_geometric: bool,
}

/// `ln(Tⁿ e^{CnT} / n!)`.
fn log_envelope(n: usize, c: f64, horizon: f64) -> f64 {
    let nf = n as f64;
    let lf: f64 = (1..=n).map(|k| (k as f64).ln()).sum();
    nf * horizon.ln() + c * nf * horizon - lf
}

/// Fits the factorial envelope to `δ_1..δ_{last}`. Entries at or below
/// `floor` are treated as round-off and excluded.
pub fn envelope_fit(deltas: &[f64], lipschitz: f64, horizon: f64, last: usize, floor: f64) -> EnvelopeFit {
    let d1 = deltas.get(1).copied().unwrap_or(0.0);
    let c = if d1 > 0.0 { (d1.ln() - log_envelope(1, lipschitz, horizon)).exp() } else { 0.0 };
    let mut checked = Vec::new();
    let mut holds = d1 > 0.0;
    for (n, &d) in deltas.iter().enumerate().take(last + 1).skip(2) {
        if d <= floor {
            break;
        }
        let env = c * log_envelope(n, lipschitz, horizon).exp();
        // 1e-9 relative allowance for round-off in the log comparison
        if d.ln() > env.ln() + 1e-9 {
            holds = false;
        }
        checked.push((n, d, env));
    }
    let mut series: Vec<f64> = vec![d1];
    series.extend(checked.iter().map(|&(_, d, _)| d));
    let ratios: Vec<f64> = series.windows(2).map(|w| w[1] / w[0]).collect();
    let super_geometric = ratios.len() >= 2 && ratios.windows(2).all(|w| w[1] < w[0]);
    EnvelopeFit { c, checked, holds, super_geometric }
}
