use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::LinearCoefficients;
use crate::paths::{PathEnsemble, TimeGrid};
use crate::profile::Profile;
use crate::stats::CHUNK;

/// `Γ(t_i, t_k)` for every path, stored as a running logarithm `L` so that
/// `Γ(t_i, t_k) = exp(L_k − L_i)`. The diagonal is exactly 1.
#[derive(Clone, Debug)]
pub struct GammaEnsemble {
    n_paths: usize,
    steps: usize,
    log: Vec<f64>,
}

impl GammaEnsemble {
    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// `L(t_i)` per path.
    pub fn log_at(&self, i: usize) -> &[f64] {
        &self.log[i * self.n_paths..(i + 1) * self.n_paths]
    }

    pub fn value(&self, i: usize, k: usize, n: usize) -> f64 {
        assert!(i <= k, "Γ(t_i, t_k) needs i ≤ k");
        (self.log[k * self.n_paths + n] - self.log[i * self.n_paths + n]).exp()
    }

    /// `Γ(t_i, t_k)` on every path.
    pub fn column(&self, i: usize, k: usize) -> Vec<f64> {
        assert!(i <= k, "Γ(t_i, t_k) needs i ≤ k");
        let (a, b) = (self.log_at(i), self.log_at(k));
        a.iter().zip(b).map(|(x, y)| (y - x).exp()).collect()
    }
}

/// Trapezoid cumulative integral `∫_0^{t_i} p` on the grid.
pub(crate) fn cumulative_trapezoid(p: &Profile, grid: &TimeGrid) -> Vec<f64> {
    let dt = grid.dt();
    let mut out = vec![0.0; grid.steps() + 1];
    for i in 0..grid.steps() {
        out[i + 1] = out[i] + 0.5 * dt * (p.value(grid.node(i)) + p.value(grid.node(i + 1)));
    }
    out
}

/// `𝔼Γ(t_i, t_k) = exp ∫_{t_i}^{t_k} α₁` with the trapezoid rule.
pub fn mean_gamma(alpha1: &Profile, grid: &TimeGrid, i: usize, k: usize) -> f64 {
    assert!(i <= k, "mean_gamma needs i ≤ k");
    if i == k {
        return 1.0;
    }
    let c = cumulative_trapezoid(alpha1, grid);
    (c[k] - c[i]).exp()
}

/// Cached `𝔼Γ(t_i, t_k)` for a fixed `α₁`.
#[derive(Clone, Debug)]
pub struct MeanGamma {
    cumulative: Vec<f64>,
}

impl MeanGamma {
    pub fn new(alpha1: &Profile, grid: &TimeGrid) -> Self {
        MeanGamma { cumulative: cumulative_trapezoid(alpha1, grid) }
    }

    pub fn value(&self, i: usize, k: usize) -> f64 {
        assert!(i <= k, "𝔼Γ(t_i, t_k) needs i ≤ k");
        (self.cumulative[k] - self.cumulative[i]).exp()
    }
}

/// Simulates the stochastic exponential
/// `dΓ = Γ(α₁dt + β₁dB + Σ_j η₁ dÑ_j)` along every path. `β₁` and `η₁` are
/// taken at the left node of each step and `Ñ` is compensated under P, so
/// every step factor has mean `exp(∫α₁)` exactly.
pub fn simulate_gamma(coeffs: &LinearCoefficients, ens: &PathEnsemble) -> Result<GammaEnsemble> {
    let grid = ens.grid();
    let np = ens.n_paths();
    let m = grid.steps();
    let dt = grid.dt();
    let atoms = ens.levy().atoms();
    let cum = cumulative_trapezoid(&coeffs.alpha1, grid);
    let mut log = vec![0.0; (m + 1) * np];
    for i in 0..m {
        let t = grid.node(i);
        let b = coeffs.beta1.value(t);
        let mut step_const = cum[i + 1] - cum[i] - 0.5 * b * b * dt;
        let mut jump_log = Vec::with_capacity(atoms.len());
        for (j, a) in atoms.iter().enumerate() {
            let e = coeffs.eta1.value(t, j, a.mark);
            if !(e > -1.0) {
                return Err(Error::Domain(format!("eta1(t={t}, ζ={}) = {e} must exceed -1", a.mark)));
            }
            let l = (1.0 + e).ln();
            step_const += (l - e) * a.weight * dt;
            jump_log.push(l);
        }
        let (head, tail) = log.split_at_mut((i + 1) * np);
        let prev = &head[i * np..];
        let next = &mut tail[..np];
        let db = ens.db(i);
        next.par_chunks_mut(CHUNK).enumerate().for_each(|(c, out)| {
            for (o, v) in out.iter_mut().enumerate() {
                let n = c * CHUNK + o;
                let mut s = prev[n] + step_const + b * db[n];
                for (j, l) in jump_log.iter().enumerate() {
                    // P-compensated increment; the compensator part is in step_const
                    s += l * ens.dn_p(i, j, n);
                }
                *v = s;
            }
        });
    }
    Ok(GammaEnsemble { n_paths: np, steps: m, log })
}
