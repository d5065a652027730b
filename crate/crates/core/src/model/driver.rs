use std::fmt::Debug;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::coefficients::{LinearCoefficients, PathwiseGamma};
use crate::paths::{LevyMeasure, TimeGrid};

/// Arguments of a driver evaluation at node `node` on path `path`.
#[derive(Clone, Copy, Debug)]
pub struct DriverArgs<'a> {
    pub t: f64,
    pub node: usize,
    pub path: usize,
    pub y: f64,
    pub z: f64,
    pub k: &'a [f64],
    pub mean: &'a [f64],
}

/// Closed-form dependence on `y` of a driver whose remaining arguments enter
/// additively: `f(t, y, ·) = f(t, 0, ·) + h(y)` with `h(0) = 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum YDependence {
    /// `h(y) = a y`.
    Linear(f64),
    /// `h(y) = a y + s sin y`.
    LinearSin { lin: f64, sin: f64 },
}

impl YDependence {
    pub fn value(self, y: f64) -> f64 {
        match self {
            YDependence::Linear(a) => a * y,
            YDependence::LinearSin { lin, sin } => lin * y + sin * y.sin(),
        }
    }
}

/// Generator `f(t, y, z, k, μ)` of a mean-field BSDE.
pub trait Driver: Send + Sync + Debug {
    fn eval(&self, a: &DriverArgs<'_>) -> f64;
    /// Declared Lipschitz constant in `(y, z, k, μ)` with
    /// `|Δy| + |Δz| + ‖Δk‖_{L²(ν)} + |Δμ|`.
    fn lipschitz(&self) -> f64;
    /// Number of mean components read (0 when the driver ignores the mean).
    fn mean_dim(&self) -> usize;
    /// Linear coefficients, when the driver is the linear one.
    fn linear_form(&self) -> Option<&LinearCoefficients> {
        None
    }
    /// True when the value depends on `t` (and the path) only.
    fn state_free(&self) -> bool {
        false
    }
    /// Additive `y`-dependence at time `t`, when the driver has one. Lets the
    /// implicit step evaluate the rest of the driver once per path.
    fn y_dependence(&self, _t: f64) -> Option<YDependence> {
        None
    }
}

#[derive(Clone, Debug, Default)]
pub struct ZeroDriver;

impl Driver for ZeroDriver {
    fn eval(&self, _: &DriverArgs<'_>) -> f64 {
        0.0
    }
    fn lipschitz(&self) -> f64 {
        0.0
    }
    fn mean_dim(&self) -> usize {
        0
    }
    fn state_free(&self) -> bool {
        true
    }
    fn y_dependence(&self, _t: f64) -> Option<YDependence> {
        Some(YDependence::Linear(0.0))
    }
}

/// `f = γ(t)`.
#[derive(Clone, Debug)]
pub struct TimeDriver {
    pub gamma: crate::profile::Profile,
}

impl Driver for TimeDriver {
    fn eval(&self, a: &DriverArgs<'_>) -> f64 {
        self.gamma.value(a.t)
    }
    fn lipschitz(&self) -> f64 {
        0.0
    }
    fn mean_dim(&self) -> usize {
        0
    }
    fn state_free(&self) -> bool {
        true
    }
    fn y_dependence(&self, _t: f64) -> Option<YDependence> {
        Some(YDependence::Linear(0.0))
    }
}

/// `f = c + a_y y + a_z z + Σ_j a_k[j] k_j w_j + Σ_l a_m[l] μ_l`.
#[derive(Clone, Debug)]
pub struct AffineDriver {
    pub constant: f64,
    pub y: f64,
    pub z: f64,
    pub k: Vec<f64>,
    pub mean: Vec<f64>,
    pub weights: Vec<f64>,
}

impl AffineDriver {
    pub fn new(constant: f64, y: f64, z: f64, k: Vec<f64>, mean: Vec<f64>, levy: &LevyMeasure) -> Self {
        AffineDriver { constant, y, z, k, mean, weights: levy.weights() }
    }
}

impl Driver for AffineDriver {
    fn eval(&self, a: &DriverArgs<'_>) -> f64 {
        let mut f = self.constant + self.y * a.y + self.z * a.z;
        for ((c, k), w) in self.k.iter().zip(a.k).zip(&self.weights) {
            f += c * k * w;
        }
        for (c, m) in self.mean.iter().zip(a.mean) {
            f += c * m;
        }
        f
    }
    fn lipschitz(&self) -> f64 {
        let k: f64 = self.k.iter().zip(&self.weights).map(|(c, w)| c * c * w).sum::<f64>().sqrt();
        let m: f64 = self.mean.iter().map(|c| c * c).sum::<f64>().sqrt();
        self.y.abs().max(self.z.abs()).max(k).max(m)
    }
    fn mean_dim(&self) -> usize {
        self.mean.iter().rposition(|&c| c != 0.0).map_or(0, |p| p + 1)
    }
    fn state_free(&self) -> bool {
        self.y == 0.0 && self.z == 0.0 && self.k.iter().all(|&c| c == 0.0) && self.mean_dim() == 0
    }
    fn y_dependence(&self, _t: f64) -> Option<YDependence> {
        Some(YDependence::Linear(self.y))
    }
}

/// Bounded nonlinear driver
/// `f = c + a_y y + s_y sin y + a_z z + s_z tanh z + Σ_j (a_k k_j + s_k tanh k_j) w_j + a_m μ₀ + s_m tanh μ₀`.
#[derive(Clone, Debug, Default)]
pub struct MixedDriver {
    pub constant: f64,
    pub y_lin: f64,
    pub y_sin: f64,
    pub z_lin: f64,
    pub z_tanh: f64,
    pub k_lin: f64,
    pub k_tanh: f64,
    pub mean_lin: f64,
    pub mean_tanh: f64,
    pub weights: Vec<f64>,
}

impl Driver for MixedDriver {
    fn eval(&self, a: &DriverArgs<'_>) -> f64 {
        let mut f = self.constant + self.y_lin * a.y + self.y_sin * a.y.sin() + self.z_lin * a.z + self.z_tanh * a.z.tanh();
        for (k, w) in a.k.iter().zip(&self.weights) {
            f += (self.k_lin * k + self.k_tanh * k.tanh()) * w;
        }
        if let Some(&m) = a.mean.first() {
            f += self.mean_lin * m + self.mean_tanh * m.tanh();
        }
        f
    }
    fn lipschitz(&self) -> f64 {
        let mass: f64 = self.weights.iter().sum();
        (self.y_lin.abs() + self.y_sin.abs())
            .max(self.z_lin.abs() + self.z_tanh.abs())
            .max((self.k_lin.abs() + self.k_tanh.abs()) * mass.sqrt())
            .max(self.mean_lin.abs() + self.mean_tanh.abs())
    }
    fn mean_dim(&self) -> usize {
        usize::from(self.mean_lin != 0.0 || self.mean_tanh != 0.0)
    }
    fn state_free(&self) -> bool {
        self.y_lin == 0.0
            && self.y_sin == 0.0
            && self.z_lin == 0.0
            && self.z_tanh == 0.0
            && self.k_lin == 0.0
            && self.k_tanh == 0.0
            && self.mean_dim() == 0
    }
    fn y_dependence(&self, _t: f64) -> Option<YDependence> {
        Some(YDependence::LinearSin { lin: self.y_lin, sin: self.y_sin })
    }
}

/// Linear driver `α₁y + α₂ȳ + β₁z + β₂z̄ + Σ_j (η₁k_j + η₂k̄_j) w_j + γ`.
///
/// Reads the mean vector `(ȳ, z̄, k̄_1..k̄_J)`. When `gamma_path` is set it
/// replaces the deterministic `γ` by per-path values.
#[derive(Clone, Debug)]
pub struct LinearDriver {
    coeffs: LinearCoefficients,
    marks: Vec<f64>,
    weights: Vec<f64>,
    lipschitz: f64,
    gamma_path: Option<Arc<PathwiseGamma>>,
}

impl LinearDriver {
    pub fn new(coeffs: LinearCoefficients, grid: &TimeGrid, levy: &LevyMeasure) -> Self {
        let lipschitz = coeffs.lipschitz(grid, levy);
        LinearDriver { coeffs, marks: levy.marks(), weights: levy.weights(), lipschitz, gamma_path: None }
    }

    pub fn with_pathwise_gamma(mut self, gamma: Arc<PathwiseGamma>) -> Self {
        self.gamma_path = Some(gamma);
        self
    }
}

impl Driver for LinearDriver {
    fn eval(&self, a: &DriverArgs<'_>) -> f64 {
        let c = &self.coeffs;
        let t = a.t;
        let mut f = c.alpha1.value(t) * a.y + c.beta1.value(t) * a.z;
        f += c.alpha2.value(t) * a.mean.first().copied().unwrap_or(0.0);
        f += c.beta2.value(t) * a.mean.get(1).copied().unwrap_or(0.0);
        for (j, (&mark, &w)) in self.marks.iter().zip(&self.weights).enumerate() {
            let kbar = a.mean.get(2 + j).copied().unwrap_or(0.0);
            f += (c.eta1.value(t, j, mark) * a.k[j] + c.eta2.value(t, j, mark) * kbar) * w;
        }
        f + match &self.gamma_path {
            Some(g) => g.at(a.node)[a.path],
            None => c.gamma.value(t),
        }
    }
    fn lipschitz(&self) -> f64 {
        self.lipschitz
    }
    fn mean_dim(&self) -> usize {
        2 + self.weights.len()
    }
    fn linear_form(&self) -> Option<&LinearCoefficients> {
        Some(&self.coeffs)
    }
    fn y_dependence(&self, t: f64) -> Option<YDependence> {
        Some(YDependence::Linear(self.coeffs.alpha1.value(t)))
    }
}

/// Outcome of the randomized admission probes for a driver.
#[derive(Clone, Debug)]
pub struct DriverCheck {
    /// `Σ_i f(t_i, 0, 0, 0, 0)² Δt` on path 0.
    pub zero_input_l2: f64,
    /// Largest observed ratio `|Δf| / (|Δy| + |Δz| + ‖Δk‖ + |Δμ|)`.
    pub max_ratio: f64,
    pub declared: f64,
    pub probes: usize,
}

impl DriverCheck {
    pub fn passed(&self) -> bool {
        self.zero_input_l2.is_finite() && self.max_ratio <= self.declared * (1.0 + 1e-9) + 1e-12
    }
}

/// Randomized probes of square integrability and the declared Lipschitz
/// bound over the box `[-bound, bound]` for every argument.
pub fn check_driver(
    driver: &dyn Driver,
    grid: &TimeGrid,
    levy: &LevyMeasure,
    mean_dim: usize,
    bound: f64,
    probes: usize,
    seed: u64,
) -> DriverCheck {
    let j = levy.len();
    let weights = levy.weights();
    let d = mean_dim.max(driver.mean_dim());
    let zeros_k = vec![0.0; j];
    let zeros_m = vec![0.0; d];
    let mut l2 = 0.0;
    for i in 0..grid.steps() {
        let a = DriverArgs { t: grid.node(i), node: i, path: 0, y: 0.0, z: 0.0, k: &zeros_k, mean: &zeros_m };
        l2 += driver.eval(&a).powi(2) * grid.dt();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_ratio: f64 = 0.0;
    let mut k1 = vec![0.0; j];
    let mut k2 = vec![0.0; j];
    let mut m1 = vec![0.0; d];
    let mut m2 = vec![0.0; d];
    for _ in 0..probes {
        let node = rng.random_range(0..=grid.steps());
        let t = grid.node(node);
        let draw = |r: &mut ChaCha8Rng| r.random_range(-bound..=bound);
        let (y1, y2, z1, z2) = (draw(&mut rng), draw(&mut rng), draw(&mut rng), draw(&mut rng));
        for x in k1.iter_mut().chain(k2.iter_mut()).chain(m1.iter_mut()).chain(m2.iter_mut()) {
            *x = draw(&mut rng);
        }
        let f1 = driver.eval(&DriverArgs { t, node, path: 0, y: y1, z: z1, k: &k1, mean: &m1 });
        let f2 = driver.eval(&DriverArgs { t, node, path: 0, y: y2, z: z2, k: &k2, mean: &m2 });
        let dk: f64 = k1.iter().zip(&k2).zip(&weights).map(|((a, b), w)| (a - b) * (a - b) * w).sum::<f64>().sqrt();
        let dm: f64 = m1.iter().zip(&m2).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let denom = (y1 - y2).abs() + (z1 - z2).abs() + dk + dm;
        if denom > 0.0 {
            max_ratio = max_ratio.max((f1 - f2).abs() / denom);
        }
    }
    DriverCheck { zero_input_l2: l2, max_ratio, declared: driver.lipschitz(), probes }
}

/// Runs [`check_driver`] and converts a failure into an admission error.
pub fn admit_driver(
    driver: &dyn Driver,
    grid: &TimeGrid,
    levy: &LevyMeasure,
    mean_dim: usize,
    probes: usize,
) -> Result<DriverCheck> {
    let check = check_driver(driver, grid, levy, mean_dim, 5.0, probes, 0x5eed);
    if !check.passed() {
        return Err(Error::Admission(format!(
            "driver probes exceed the declared Lipschitz constant {} (observed ratio {:.6}) or f(t,0) is not square integrable",
            check.declared, check.max_ratio
        )));
    }
    Ok(check)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::terminal::TerminalCondition;
    use crate::paths::{build_grid, Atom};
    use crate::profile::{AtomProfile, Profile};

    fn setup() -> (TimeGrid, LevyMeasure) {
        (
            build_grid(1.0, 50).unwrap(),
            LevyMeasure::new(vec![Atom { mark: 1.0, weight: 1.5 }, Atom { mark: -0.5, weight: 0.5 }]).unwrap(),
        )
    }

    #[test]
    fn builtin_drivers_pass_their_own_probes() {
        let (g, l) = setup();
        let drivers: Vec<Box<dyn Driver>> = vec![
            Box::new(ZeroDriver),
            Box::new(TimeDriver { gamma: Profile::Affine { intercept: 1.0, slope: 2.0 } }),
            Box::new(AffineDriver::new(0.3, -0.5, 0.2, vec![0.4, -0.1], vec![1.0, 0.5], &l)),
            Box::new(MixedDriver {
                y_sin: 0.7,
                z_tanh: -0.3,
                k_tanh: 0.5,
                k_lin: 0.2,
                mean_tanh: 0.4,
                weights: l.weights(),
                ..Default::default()
            }),
            Box::new(LinearDriver::new(
                LinearCoefficients {
                    alpha1: Profile::Constant(0.2),
                    alpha2: Profile::Affine { intercept: 0.1, slope: 0.3 },
                    beta1: Profile::Constant(-0.4),
                    beta2: Profile::Constant(0.25),
                    eta1: AtomProfile::from(0.3),
                    eta2: AtomProfile::MarkScaled(Profile::Constant(0.2)),
                    gamma: Profile::Constant(1.0),
                    terminal: TerminalCondition::Constant(1.0),
                },
                &g,
                &l,
            )),
        ];
        for d in &drivers {
            let c = check_driver(d.as_ref(), &g, &l, 4, 5.0, 1000, 1);
            assert!(c.passed(), "{d:?}: {c:?}");
        }
    }

    #[test]
    fn understated_lipschitz_is_caught() {
        #[derive(Debug)]
        struct Liar;
        impl Driver for Liar {
            fn eval(&self, a: &DriverArgs<'_>) -> f64 {
                3.0 * a.y
            }
            fn lipschitz(&self) -> f64 {
                1.0
            }
            fn mean_dim(&self) -> usize {
                0
            }
        }
        let (g, l) = setup();
        assert!(!check_driver(&Liar, &g, &l, 0, 5.0, 1000, 1).passed());
        assert!(admit_driver(&Liar, &g, &l, 0, 1000).is_err());
    }

    #[test]
    fn affine_driver_value() {
        let (_, l) = setup();
        let d = AffineDriver::new(1.0, 2.0, 3.0, vec![1.0, 2.0], vec![0.5], &l);
        let v = d.eval(&DriverArgs { t: 0.0, node: 0, path: 0, y: 1.0, z: 1.0, k: &[1.0, 1.0], mean: &[2.0] });
        // 1 + 2 + 3 + 1·1.5 + 2·0.5 + 0.5·2
        assert_eq!(v, 9.5);
        assert_eq!(d.mean_dim(), 1);
    }
}
