use crate::paths::TimeGrid;
use crate::stats;

/// `(Y, Z, K)` per path and node with ensemble means.
///
/// Layout is node-major: `y[i * n_paths + n]`, `k[(i * J + j) * n_paths + n]`,
/// `kbar[i * J + j]`.
#[derive(Clone, Debug)]
pub struct SolutionGrid {
    grid: TimeGrid,
    weights: Vec<f64>,
    n_paths: usize,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub k: Vec<f64>,
    pub ybar: Vec<f64>,
    pub zbar: Vec<f64>,
    pub kbar: Vec<f64>,
}

impl SolutionGrid {
    pub fn zeros(grid: &TimeGrid, weights: &[f64], n_paths: usize) -> Self {
        let nodes = grid.steps() + 1;
        let j = weights.len();
        SolutionGrid {
            grid: grid.clone(),
            weights: weights.to_vec(),
            n_paths,
            y: vec![0.0; nodes * n_paths],
            z: vec![0.0; nodes * n_paths],
            k: vec![0.0; nodes * j * n_paths],
            ybar: vec![0.0; nodes],
            zbar: vec![0.0; nodes],
            kbar: vec![0.0; nodes * j],
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
    pub fn atoms(&self) -> usize {
        self.weights.len()
    }
    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn y_at(&self, i: usize) -> &[f64] {
        &self.y[i * self.n_paths..(i + 1) * self.n_paths]
    }
    pub fn z_at(&self, i: usize) -> &[f64] {
        &self.z[i * self.n_paths..(i + 1) * self.n_paths]
    }
    pub fn k_at(&self, i: usize, j: usize) -> &[f64] {
        let r = i * self.atoms() + j;
        &self.k[r * self.n_paths..(r + 1) * self.n_paths]
    }
    pub fn y_at_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.y[i * self.n_paths..(i + 1) * self.n_paths]
    }
    pub fn z_at_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.z[i * self.n_paths..(i + 1) * self.n_paths]
    }
    pub fn k_at_mut(&mut self, i: usize, j: usize) -> &mut [f64] {
        let r = i * self.atoms() + j;
        &mut self.k[r * self.n_paths..(r + 1) * self.n_paths]
    }

    /// Fills `out` with `K(t_i, ζ_j)` for all atoms on path `n`.
    pub fn k_path(&self, i: usize, n: usize, out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            *o = self.k_at(i, j)[n];
        }
    }

    /// Recomputes the ensemble means from the stored arrays.
    pub fn refresh_means(&mut self) {
        let j = self.atoms();
        for i in 0..=self.grid.steps() {
            self.ybar[i] = stats::mean(self.y_at(i));
            self.zbar[i] = stats::mean(self.z_at(i));
            for a in 0..j {
                self.kbar[i * j + a] = stats::mean(self.k_at(i, a));
            }
        }
    }

    /// Pathwise difference `self − other`, means refreshed.
    pub fn difference(&self, other: &SolutionGrid) -> SolutionGrid {
        let sub = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>();
        let mut d = SolutionGrid {
            grid: self.grid.clone(),
            weights: self.weights.clone(),
            n_paths: self.n_paths,
            y: sub(&self.y, &other.y),
            z: sub(&self.z, &other.z),
            k: sub(&self.k, &other.k),
            ybar: Vec::new(),
            zbar: Vec::new(),
            kbar: Vec::new(),
        };
        d.ybar = vec![0.0; self.ybar.len()];
        d.zbar = vec![0.0; self.zbar.len()];
        d.kbar = vec![0.0; self.kbar.len()];
        d.refresh_means();
        d
    }

    /// `max_i mean_n |Y_a(t_i) − Y_b(t_i)|²` and `Σ_{i<M} mean_n |…|² Δt`.
    pub fn y_distance(&self, other: &SolutionGrid) -> (f64, f64) {
        let mut sup: f64 = 0.0;
        let mut integ = 0.0;
        let m = self.grid.steps();
        for i in 0..=m {
            let a = self.y_at(i);
            let b = other.y_at(i);
            let ms = stats::chunked_sum(a.len(), |n| (a[n] - b[n]) * (a[n] - b[n])) / a.len() as f64;
            sup = sup.max(ms);
            if i < m {
                integ += ms * self.grid.dt();
            }
        }
        (sup, integ)
    }
}

/// `E ∫₀ᵀ e^{βt}(Y² + Z² + Σ_j K_j² w_j) dt`, left-endpoint rule.
pub fn beta_norm(sol: &SolutionGrid, beta: f64) -> f64 {
    let grid = sol.grid();
    let j = sol.atoms();
    let w = sol.weights();
    let mut total = 0.0;
    for i in 0..grid.steps() {
        let y = sol.y_at(i);
        let z = sol.z_at(i);
        let ks: Vec<&[f64]> = (0..j).map(|a| sol.k_at(i, a)).collect();
        let s = stats::chunked_sum(sol.n_paths(), |n| {
            let mut v = y[n] * y[n] + z[n] * z[n];
            for (a, k) in ks.iter().enumerate() {
                v += k[n] * k[n] * w[a];
            }
            v
        }) / sol.n_paths() as f64;
        total += (beta * grid.node(i)).exp() * s * grid.dt();
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::mean::{mean_functional_eval, MeanFunctional};
    use crate::paths::build_grid;
    use proptest::prelude::*;

    fn constant_y(c: f64, steps: usize) -> SolutionGrid {
        let g = build_grid(1.0, steps).unwrap();
        let mut s = SolutionGrid::zeros(&g, &[1.0], 4);
        s.y.iter_mut().for_each(|v| *v = c);
        s.refresh_means();
        s
    }

    #[test]
    fn norm_examples() {
        assert_eq!(beta_norm(&constant_y(0.0, 10), 1.0), 0.0);
        assert!((beta_norm(&constant_y(1.0, 10), 0.0) - 1.0).abs() < 1e-14);
        let v = beta_norm(&constant_y(1.0, 1000), 1.0);
        let exact = std::f64::consts::E - 1.0;
        // left-endpoint rule error ≈ (e − 1)Δt/2
        assert!((v - exact).abs() <= exact * 1e-3, "{v}");
        assert!(v < exact);
    }

    #[test]
    fn identity_functionals_reproduce_means() {
        let g = build_grid(1.0, 3).unwrap();
        let mut s = SolutionGrid::zeros(&g, &[1.0, 2.0], 3);
        for (n, v) in s.y.iter_mut().enumerate() {
            *v = n as f64 * 0.37;
        }
        for (n, v) in s.k.iter_mut().enumerate() {
            *v = (n as f64).sin();
        }
        s.refresh_means();
        for i in 0..=3 {
            assert_eq!(mean_functional_eval(MeanFunctional::Y, &s, i), vec![s.ybar[i]]);
            let f = mean_functional_eval(MeanFunctional::Full, &s, i);
            assert_eq!(f, vec![s.ybar[i], s.zbar[i], s.kbar[2 * i], s.kbar[2 * i + 1]]);
        }
        let c = constant_y(1.5, 4);
        assert_eq!(mean_functional_eval(MeanFunctional::YSquared, &c, 2), vec![2.25]);
    }

    proptest! {
        #[test]
        fn norm_is_nondecreasing_in_beta(vals in proptest::collection::vec(-3.0f64..3.0, 12), b1 in 0.0f64..5.0, db in 0.0f64..5.0) {
            let g = build_grid(1.0, 2).unwrap();
            let mut s = SolutionGrid::zeros(&g, &[0.7], 2);
            s.y.copy_from_slice(&vals[0..6]);
            s.z.copy_from_slice(&vals[6..12]);
            s.k.copy_from_slice(&vals[0..6]);
            s.refresh_means();
            prop_assert!(beta_norm(&s, b1) <= beta_norm(&s, b1 + db) * (1.0 + 1e-15));
        }
    }
}
