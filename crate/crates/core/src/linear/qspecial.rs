use crate::error::{Error, Result};
use crate::model::{LinearCoefficients, LinearDriver, MeanFunctional, PreparedTerminal};
use crate::paths::{girsanov_density, shift_to_q, PathEnsemble, TimeGrid};
use crate::picard::{picard_full_freeze, PicardSettings};
use crate::profile::Profile;
use crate::stats;

/// Monte Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

impl Estimate {
    /// `|a − b| / sqrt(se_a² + se_b²)`; 0 when both are exact and equal.
    pub fn z_score(&self, other: &Estimate) -> f64 {
        let d = (self.value - other.value).abs();
        let s = self.se.hypot(other.se);
        if d == 0.0 {
            0.0
        } else {
            d / s
        }
    }
}

#[derive(Clone, Debug)]
pub struct QSpecialReport {
    /// `E_Q[ξ]` as `E[ξ M(T)]` on the P-ensemble.
    pub terminal_weighted: Estimate,
    /// `E_Q[ξ]` as a plain mean on the shifted ensemble.
    pub terminal_shifted: Estimate,
    pub y0_weighted: Estimate,
    pub y0_shifted: Estimate,
    /// Combined z-score of the two `Y(0)` estimates.
    pub z_score: f64,
    /// `E_Q[Y(t_i)]` from the shifted estimate.
    pub mean_path: Vec<f64>,
    /// Picard solve of the same equation on the shifted ensemble.
    pub picard: Option<Estimate>,
}

/// Crank–Nicolson solution of `m′ = −a m − γ` with `m(T) = terminal`;
/// returns `m(t_i)` and `∂m(0)/∂m(T)`.
fn backward_linear_ode(grid: &TimeGrid, a: &Profile, b: &Profile, gamma: &Profile, terminal: f64) -> (Vec<f64>, f64) {
    let m = grid.steps();
    let h = 0.5 * grid.dt();
    let coef = |t: f64| a.value(t) + b.value(t);
    let mut path = vec![0.0; m + 1];
    path[m] = terminal;
    let mut sens = 1.0;
    for i in (0..m).rev() {
        let (t0, t1) = (grid.node(i), grid.node(i + 1));
        let denom = 1.0 - h * coef(t0);
        let gain = (1.0 + h * coef(t1)) / denom;
        path[i] = gain * path[i + 1] + h * (gamma.value(t0) + gamma.value(t1)) / denom;
        sens *= gain;
    }
    (path, sens)
}

/// Solves the linear equation whose mean term is `α² E_Q[Y]` under the
/// measure that absorbs `β¹` and `η¹`. Under Q the mean satisfies a scalar
/// linear ODE, solved directly; `E_Q[ξ]` is estimated both by density
/// weighting on P and on the regenerated Q-ensemble.
pub fn q_special_solve(
    coeffs: &LinearCoefficients,
    ens: &PathEnsemble,
    picard: Option<&PicardSettings>,
) -> Result<QSpecialReport> {
    if !coeffs.beta2.is_zero() || !coeffs.eta2.is_zero() {
        return Err(Error::Config(
            "the Q-measure special case takes only α² as mean coefficient; set beta2 and eta2 to zero".into(),
        ));
    }
    coeffs.validate(ens.grid(), ens.levy())?;
    let grid = ens.grid();
    let density = girsanov_density(ens, &coeffs.beta1, &coeffs.eta1)?;
    let xi_p = PreparedTerminal::new(&coeffs.terminal, ens)?.values;
    let weighted: Vec<f64> = xi_p.iter().zip(density.terminal()).map(|(a, b)| a * b).collect();
    let (w, w_se) = stats::mean_se(&weighted);

    let q = shift_to_q(ens, &coeffs.beta1, &coeffs.eta1)?;
    let xi_q = PreparedTerminal::new(&coeffs.terminal, &q)?.values;
    let (s, s_se) = stats::mean_se(&xi_q);

    let (mean_path, sens) = backward_linear_ode(grid, &coeffs.alpha1, &coeffs.alpha2, &coeffs.gamma, s);
    let (wp, _) = backward_linear_ode(grid, &coeffs.alpha1, &coeffs.alpha2, &coeffs.gamma, w);
    let y0_shifted = Estimate { value: mean_path[0], se: sens.abs() * s_se };
    let y0_weighted = Estimate { value: wp[0], se: sens.abs() * w_se };

    let picard = match picard {
        Some(settings) => {
            let mut qc = LinearCoefficients::zero(coeffs.terminal.clone());
            qc.alpha1 = coeffs.alpha1.clone();
            qc.alpha2 = coeffs.alpha2.clone();
            qc.gamma = coeffs.gamma.clone();
            let driver = LinearDriver::new(qc, grid, q.levy());
            let (_, rep) = picard_full_freeze(&driver, MeanFunctional::Full, &coeffs.terminal, &q, settings)?;
            Some(Estimate { value: rep.y0, se: rep.y0_se })
        }
        None => None,
    };
    Ok(QSpecialReport {
        terminal_weighted: Estimate { value: w, se: w_se },
        terminal_shifted: Estimate { value: s, se: s_se },
        z_score: y0_weighted.z_score(&y0_shifted),
        y0_weighted,
        y0_shifted,
        mean_path,
        picard,
    })
}
