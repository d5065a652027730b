use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::model::solution::SolutionGrid;
use crate::stats;

/// Functional `φ(y, z, k)` whose ensemble mean enters the driver.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MeanFunctional {
    /// `φ = y`
    Y,
    /// `φ = (y, z, Σ_j w_j k_j / λ_tot)`
    YZK,
    /// `φ = (y, z, k_1, …, k_J)`
    Full,
    /// `φ = y²`
    YSquared,
}

impl MeanFunctional {
    pub fn dim(&self, atoms: usize) -> usize {
        match self {
            MeanFunctional::Y | MeanFunctional::YSquared => 1,
            MeanFunctional::YZK => 3,
            MeanFunctional::Full => 2 + atoms,
        }
    }

    /// Pathwise evaluation into `out` (length [`Self::dim`]).
    pub fn eval_into(&self, y: f64, z: f64, k: &[f64], weights: &[f64], out: &mut [f64]) {
        match self {
            MeanFunctional::Y => out[0] = y,
            MeanFunctional::YSquared => out[0] = y * y,
            MeanFunctional::YZK => {
                out[0] = y;
                out[1] = z;
                let mass: f64 = weights.iter().sum();
                out[2] = if mass > 0.0 { k.iter().zip(weights).map(|(a, w)| a * w).sum::<f64>() / mass } else { 0.0 };
            }
            MeanFunctional::Full => {
                out[0] = y;
                out[1] = z;
                out[2..2 + k.len()].copy_from_slice(k);
            }
        }
    }

    /// Bound on the partial derivatives of every component, with the
    /// jump gradient measured in `L²(ν)`. `YSquared` is bounded on the
    /// probe box `|y| ≤ bound` only.
    pub fn derivative_bound(&self, weights: &[f64], bound: f64) -> f64 {
        match self {
            MeanFunctional::Y => 1.0,
            MeanFunctional::YSquared => 2.0 * bound,
            MeanFunctional::YZK => {
                let mass: f64 = weights.iter().sum();
                if mass > 0.0 {
                    1.0f64.max(1.0 / mass.sqrt())
                } else {
                    1.0
                }
            }
            MeanFunctional::Full => weights.iter().map(|w| 1.0 / w.sqrt()).fold(1.0, f64::max),
        }
    }

    /// True for functionals that are coordinate projections.
    pub fn is_identity(&self) -> bool {
        !matches!(self, MeanFunctional::YSquared)
    }
}

/// Ensemble mean of `φ(Y, Z, K)` at node `i`.
pub fn mean_functional_eval(phi: MeanFunctional, sol: &SolutionGrid, i: usize) -> Vec<f64> {
    let j = sol.atoms();
    let w = sol.weights();
    match phi {
        MeanFunctional::Y => vec![sol.ybar[i]],
        MeanFunctional::YSquared => {
            let y = sol.y_at(i);
            vec![stats::chunked_sum(y.len(), |n| y[n] * y[n]) / y.len() as f64]
        }
        MeanFunctional::YZK => {
            let mass: f64 = w.iter().sum();
            let k = if mass > 0.0 { (0..j).map(|a| sol.kbar[i * j + a] * w[a]).sum::<f64>() / mass } else { 0.0 };
            vec![sol.ybar[i], sol.zbar[i], k]
        }
        MeanFunctional::Full => {
            let mut v = vec![sol.ybar[i], sol.zbar[i]];
            v.extend_from_slice(&sol.kbar[i * j..(i + 1) * j]);
            v
        }
    }
}

/// Largest finite-difference partial derivative of any component observed
/// on random probes in the box `[-bound, bound]`.
pub fn check_mean_functional(phi: MeanFunctional, weights: &[f64], bound: f64, probes: usize, seed: u64) -> f64 {
    let j = weights.len();
    let d = phi.dim(j);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut base = vec![0.0; d];
    let mut bumped = vec![0.0; d];
    let mut k = vec![0.0; j];
    for _ in 0..probes {
        let y = rng.random_range(-bound..=bound);
        let z = rng.random_range(-bound..=bound);
        for x in k.iter_mut() {
            *x = rng.random_range(-bound..=bound);
        }
        phi.eval_into(y, z, &k, weights, &mut base);
        let mut partials = vec![vec![0.0; 2 + j]; d];
        phi.eval_into(y + h, z, &k, weights, &mut bumped);
        for c in 0..d {
            partials[c][0] = (bumped[c] - base[c]) / h;
        }
        phi.eval_into(y, z + h, &k, weights, &mut bumped);
        for c in 0..d {
            partials[c][1] = (bumped[c] - base[c]) / h;
        }
        for a in 0..j {
            k[a] += h;
            phi.eval_into(y, z, &k, weights, &mut bumped);
            k[a] -= h;
            for c in 0..d {
                partials[c][2 + a] = (bumped[c] - base[c]) / h;
            }
        }
        for p in &partials {
            // |∂y| + |∂z| + ‖∇_k‖ with the k-gradient dual to L²(ν)
            let kn: f64 = (0..j).map(|a| p[2 + a] * p[2 + a] / weights[a]).sum::<f64>().sqrt();
            worst = worst.max(p[0].abs().max(p[1].abs()).max(kn));
        }
    }
    worst
}
