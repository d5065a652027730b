use std::sync::Arc;

use crate::error::Result;
use crate::linear::gamma::{simulate_gamma, GammaEnsemble};
use crate::linear::system::{assemble_system, direct_solve, neumann_solve, quad_weight, MeanVector, NeumannOptions, NeumannSolution, SystemForm, VolterraSystem};
use crate::model::{LinearCoefficients, PathwiseGamma, PreparedTerminal};
use crate::paths::PathEnsemble;
use crate::stats;

/// `Y(0)` with its standard error and the mean path `Ȳ(t_i)`.
#[derive(Clone, Debug)]
pub struct ClosedForm {
    pub y0: f64,
    pub y0_se: f64,
    pub ybar: Vec<f64>,
}

/// `Y(0) = E[ξΓ(0,T) + ∫_0^T Γ(0,s)(α₂Ȳ + β₂Z̄ + Σ_j η₂K̄_j w_j + γ)(s) ds]`
/// with the trapezoid rule in time.
pub fn y_closed_formula(
    coeffs: &LinearCoefficients,
    ens: &PathEnsemble,
    gamma: &GammaEnsemble,
    xi: &[f64],
    pathwise: Option<&PathwiseGamma>,
    v: &MeanVector,
) -> ClosedForm {
    let grid = ens.grid();
    let m = grid.steps();
    let dt = grid.dt();
    let levy = ens.levy();
    let np = ens.n_paths();
    let mut sample: Vec<f64> = xi.iter().zip(&gamma.column(0, m)).map(|(a, b)| a * b).collect();
    for l in 0..=m {
        let w = quad_weight(0, l, m, dt);
        if w == 0.0 {
            continue;
        }
        let t = grid.node(l);
        let mut h = coeffs.alpha2.value(t) * v.y(l) + coeffs.beta2.value(t) * v.z(l);
        for (j, a) in levy.atoms().iter().enumerate() {
            h += coeffs.eta2.value(t, j, a.mark) * v.k(l, j) * a.weight;
        }
        let g0l = gamma.column(0, l);
        match pathwise {
            Some(pg) => {
                let gl = pg.at(l);
                for n in 0..np {
                    sample[n] += w * g0l[n] * (h + gl[n]);
                }
            }
            None => {
                let h = h + coeffs.gamma.value(t);
                for n in 0..np {
                    sample[n] += w * g0l[n] * h;
                }
            }
        }
    }
    let (y0, y0_se) = stats::mean_se(&sample);
    ClosedForm { y0, y0_se, ybar: v.y_series() }
}

#[derive(Clone, Debug, Default)]
pub struct LinearOptions {
    pub form: SystemForm,
    pub neumann: NeumannOptions,
    /// Also solve densely and record the gap to the Neumann solution.
    pub direct: bool,
}

#[derive(Clone, Debug)]
pub struct LinearSolution {
    pub system: VolterraSystem,
    pub neumann: NeumannSolution,
    pub direct: Option<MeanVector>,
    /// `‖V_neumann − V_direct‖_∞` when the dense oracle ran.
    pub oracle_gap: Option<f64>,
    pub closed: ClosedForm,
}

/// Full closed-form pipeline: `Γ`, mean system, windowed Neumann solve and
/// the representation of `Y(0)`.
pub fn solve_linear(
    coeffs: &LinearCoefficients,
    ens: &PathEnsemble,
    pathwise: Option<Arc<PathwiseGamma>>,
    opts: &LinearOptions,
) -> Result<LinearSolution> {
    coeffs.validate(ens.grid(), ens.levy())?;
    let gamma = simulate_gamma(coeffs, ens)?;
    let system = assemble_system(coeffs, ens, &gamma, pathwise.as_deref(), opts.form)?;
    let neumann = neumann_solve(&system, &opts.neumann)?;
    let direct = if opts.direct { Some(direct_solve(&system)?) } else { None };
    let oracle_gap = direct.as_ref().map(|d| d.max_abs_diff(&neumann.v));
    let xi = PreparedTerminal::new(&coeffs.terminal, ens)?.values;
    let closed = y_closed_formula(coeffs, ens, &gamma, &xi, pathwise.as_deref(), &neumann.v);
    Ok(LinearSolution { system, neumann, direct, oracle_gap, closed })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TerminalCondition;
    use crate::paths::{build_grid, simulate_ensemble, Atom, LevyMeasure};
    use crate::profile::Profile;

    fn ens(n: usize, steps: usize) -> PathEnsemble {
        let g = build_grid(1.0, steps).unwrap();
        let l = LevyMeasure::new(vec![Atom { mark: 0.5, weight: 1.0 }]).unwrap();
        simulate_ensemble(&g, &l, n, 41).unwrap()
    }

    #[test]
    fn zero_coefficients_return_the_constant() {
        let e = ens(100, 10);
        let c = LinearCoefficients::zero(TerminalCondition::Constant(3.25));
        let s = solve_linear(&c, &e, None, &LinearOptions::default()).unwrap();
        assert_eq!(s.closed.y0, 3.25);
        assert_eq!(s.closed.y0_se, 0.0);
    }

    #[test]
    fn deterministic_case_matches_ode() {
        let e = ens(50, 100);
        let mut c = LinearCoefficients::zero(TerminalCondition::Constant(2.0));
        c.alpha1 = Profile::Constant(0.1);
        c.alpha2 = Profile::Constant(0.2);
        let s = solve_linear(&c, &e, None, &LinearOptions { direct: true, ..Default::default() }).unwrap();
        assert!((s.closed.y0 - 2.0 * 0.3f64.exp()).abs() < 1e-3);
        assert!(s.oracle_gap.unwrap() <= 1e-10);
    }

    #[test]
    fn constant_source_is_integrated_exactly() {
        let e = ens(50, 100);
        let mut c = LinearCoefficients::zero(TerminalCondition::Constant(1.0));
        c.gamma = Profile::Constant(0.75);
        let s = solve_linear(&c, &e, None, &LinearOptions::default()).unwrap();
        assert!((s.closed.y0 - 1.75).abs() < 1e-12);
    }
}
