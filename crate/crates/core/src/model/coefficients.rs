use crate::error::{Error, Result};
use crate::model::terminal::TerminalCondition;
use crate::paths::{LevyMeasure, TimeGrid};
use crate::profile::{AtomProfile, Profile};

/// Coefficients of the linear mean-field BSDE
/// `f = α₁y + α₂ȳ + β₁z + β₂z̄ + Σ_j (η₁k_j + η₂k̄_j) w_j + γ`.
#[derive(Clone, Debug)]
pub struct LinearCoefficients {
    pub alpha1: Profile,
    pub alpha2: Profile,
    pub beta1: Profile,
    pub beta2: Profile,
    pub eta1: AtomProfile,
    pub eta2: AtomProfile,
    pub gamma: Profile,
    pub terminal: TerminalCondition,
}

impl LinearCoefficients {
    /// All coefficients zero with the given terminal condition.
    pub fn zero(terminal: TerminalCondition) -> Self {
        LinearCoefficients {
            alpha1: Profile::default(),
            alpha2: Profile::default(),
            beta1: Profile::default(),
            beta2: Profile::default(),
            eta1: AtomProfile::default(),
            eta2: AtomProfile::default(),
            gamma: Profile::default(),
            terminal,
        }
    }

    /// Checks finiteness on the grid and `η₁ > −1` on grid × atoms.
    pub fn validate(&self, grid: &TimeGrid, levy: &LevyMeasure) -> Result<()> {
        for t in grid.nodes() {
            for (name, p) in [
                ("alpha1", &self.alpha1),
                ("alpha2", &self.alpha2),
                ("beta1", &self.beta1),
                ("beta2", &self.beta2),
                ("gamma", &self.gamma),
            ] {
                if !p.value(t).is_finite() {
                    return Err(Error::Domain(format!("{name} is not finite at t={t}")));
                }
            }
            for (j, a) in levy.atoms().iter().enumerate() {
                let e1 = self.eta1.value(t, j, a.mark);
                let e2 = self.eta2.value(t, j, a.mark);
                if !e2.is_finite() {
                    return Err(Error::Domain(format!("eta2 is not finite at t={t}, ζ={}", a.mark)));
                }
                if !(e1 > -1.0) {
                    return Err(Error::Domain(format!("eta1(t={t}, ζ={}) = {e1} must exceed -1", a.mark)));
                }
            }
        }
        Ok(())
    }

    /// Lipschitz constant of the driver in (y, z, k) and in the mean vector
    /// `(ȳ, z̄, k̄_1..k̄_J)` under the Euclidean norm, sup over grid nodes.
    pub fn lipschitz(&self, grid: &TimeGrid, levy: &LevyMeasure) -> f64 {
        let mut c: f64 = 0.0;
        for t in grid.nodes() {
            let mut eta1_sq = 0.0;
            let mut mean_sq = self.alpha2.value(t).powi(2) + self.beta2.value(t).powi(2);
            for (j, a) in levy.atoms().iter().enumerate() {
                eta1_sq += self.eta1.value(t, j, a.mark).powi(2) * a.weight;
                mean_sq += (self.eta2.value(t, j, a.mark) * a.weight).powi(2);
            }
            c = c
                .max(self.alpha1.value(t).abs())
                .max(self.beta1.value(t).abs())
                .max(eta1_sq.sqrt())
                .max(mean_sq.sqrt());
        }
        c
    }
}

/// Adapted `γ` sampled per node and path, node-major `(M+1) × n_paths`,
/// optionally with deterministic Malliavin derivatives `D_{t}γ(s)` and
/// `D_{t,ζ_j}γ(s)` that depend on `t` only (per node, and per node × atom).
#[derive(Clone, Debug)]
pub struct PathwiseGamma {
    pub n_paths: usize,
    pub values: Vec<f64>,
    pub d_brownian: Option<Vec<f64>>,
    pub d_jump: Option<Vec<f64>>,
}

impl PathwiseGamma {
    pub fn at(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_paths..(i + 1) * self.n_paths]
    }
}
