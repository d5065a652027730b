//! Time grids, finite Lévy measures, seeded noise ensembles and the
//! Girsanov change of measure.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::profile::{AtomProfile, Profile};
use crate::stats::CHUNK;

/// Uniform grid `t_i = i·Δt` on `[0, T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
    dt: f64,
}

pub fn build_grid(horizon: f64, steps: usize) -> Result<TimeGrid> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::Config(format!("horizon T must be positive and finite, got {horizon}")));
    }
    if steps == 0 {
        return Err(Error::Config("number of steps M must be at least 1".into()));
    }
    Ok(TimeGrid { horizon, steps, dt: horizon / steps as f64 })
}

impl TimeGrid {
    pub fn horizon(&self) -> f64 {
        self.horizon
    }
    /// Number of steps `M`; there are `M + 1` nodes.
    pub fn steps(&self) -> usize {
        self.steps
    }
    pub fn dt(&self) -> f64 {
        self.dt
    }
    /// Node `t_i = i·Δt`; the last node is `T` itself.
    pub fn node(&self, i: usize) -> f64 {
        if i == self.steps {
            self.horizon
        } else {
            i as f64 * self.dt
        }
    }
    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.steps).map(|i| self.node(i)).collect()
    }
    /// Index of the node closest to `t`.
    pub fn nearest(&self, t: f64) -> usize {
        ((t / self.dt).round().max(0.0) as usize).min(self.steps)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Atom {
    pub mark: f64,
    pub weight: f64,
}

/// Finite Lévy measure `ν = Σ_j w_j δ_{ζ_j}`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct LevyMeasure {
    atoms: Vec<Atom>,
}

impl LevyMeasure {
    pub fn new(atoms: Vec<Atom>) -> Result<Self> {
        for (j, a) in atoms.iter().enumerate() {
            if a.mark == 0.0 || !a.mark.is_finite() {
                return Err(Error::Config(format!("atom {j}: mark must be a nonzero finite real, got {}", a.mark)));
            }
            if !(a.weight > 0.0 && a.weight.is_finite()) {
                return Err(Error::Config(format!("atom {j}: weight must be positive and finite, got {}", a.weight)));
            }
            if atoms[..j].iter().any(|b| b.mark == a.mark) {
                return Err(Error::Config(format!("atom {j}: duplicate mark {}", a.mark)));
            }
        }
        Ok(LevyMeasure { atoms })
    }

    pub fn empty() -> Self {
        LevyMeasure { atoms: Vec::new() }
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }
    pub fn len(&self) -> usize {
        self.atoms.len()
    }
    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }
    pub fn weights(&self) -> Vec<f64> {
        self.atoms.iter().map(|a| a.weight).collect()
    }
    pub fn marks(&self) -> Vec<f64> {
        self.atoms.iter().map(|a| a.mark).collect()
    }
    pub fn total_mass(&self) -> f64 {
        self.atoms.iter().map(|a| a.weight).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Measure {
    P,
    Q,
}

/// Brownian increments and per-atom jump counts for `n_paths` paths.
///
/// Arrays are node-major: index `i * n_paths + n` for per-step data and
/// `(i * J + j) * n_paths + n` for per-atom data. Increments are stored raw
/// (as seen under P); `drift` and `compensator` hold the per-step means of
/// the raw increments and counts under the ensemble's own measure.
#[derive(Clone, Debug)]
pub struct PathEnsemble {
    grid: TimeGrid,
    levy: LevyMeasure,
    n_paths: usize,
    seed: u64,
    measure: Measure,
    increments: Vec<f64>,
    counts: Vec<u32>,
    drift: Vec<f64>,
    compensator: Vec<f64>,
    brownian: Vec<f64>,
    compensated: Vec<f64>,
}

const JUMP_REGION_SHIFT: u32 = 40;

fn path_rng(seed: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng
}

/// Poisson draw by inversion; consumes exactly one uniform.
fn poisson_inverse(u: f64, mean: f64) -> u32 {
    if mean <= 0.0 {
        return 0;
    }
    let mut k = 0u32;
    let mut p = (-mean).exp();
    let mut cdf = p;
    while u > cdf && k < 100_000 {
        k += 1;
        p *= mean / k as f64;
        if p == 0.0 && cdf < u {
            // underflowed tail: stop at the last representable term
            break;
        }
        cdf += p;
    }
    k
}

/// Draws increments with per-step means `drift[i]` and counts with
/// per-step means `intensity[i * J + j]`.
///
/// Each path owns ChaCha stream `n`. Brownian normals are read sequentially
/// from word 0; atom `j` reads one uniform per step from its own region, so
/// changing an intensity never shifts any other draw.
fn generate(
    grid: &TimeGrid,
    atoms: usize,
    n_paths: usize,
    seed: u64,
    drift: &[f64],
    intensity: &[f64],
) -> (Vec<f64>, Vec<u32>) {
    let m = grid.steps();
    let sq = grid.dt().sqrt();
    let blocks: Vec<(Vec<f64>, Vec<u32>)> = (0..n_paths.div_ceil(CHUNK))
        .into_par_iter()
        .map(|b| {
            let lo = b * CHUNK;
            let hi = (lo + CHUNK).min(n_paths);
            let width = hi - lo;
            let mut db = vec![0.0; m * width];
            let mut cnt = vec![0u32; m * atoms * width];
            for n in lo..hi {
                let local = n - lo;
                let mut rng = path_rng(seed, n);
                for i in 0..m {
                    let z: f64 = rng.sample(StandardNormal);
                    db[i * width + local] = sq * z + drift[i];
                }
                for j in 0..atoms {
                    rng.set_word_pos(((j as u128) + 1) << JUMP_REGION_SHIFT);
                    for i in 0..m {
                        let u: f64 = rng.random();
                        cnt[(i * atoms + j) * width + local] = poisson_inverse(u, intensity[i * atoms + j]);
                    }
                }
            }
            (db, cnt)
        })
        .collect();
    let mut db = vec![0.0; m * n_paths];
    let mut cnt = vec![0u32; m * atoms * n_paths];
    for (b, (bdb, bcnt)) in blocks.iter().enumerate() {
        let lo = b * CHUNK;
        let width = bdb.len() / m.max(1);
        for i in 0..m {
            db[i * n_paths + lo..i * n_paths + lo + width].copy_from_slice(&bdb[i * width..(i + 1) * width]);
            for j in 0..atoms {
                let r = i * atoms + j;
                cnt[r * n_paths + lo..r * n_paths + lo + width].copy_from_slice(&bcnt[r * width..(r + 1) * width]);
            }
        }
    }
    (db, cnt)
}

impl PathEnsemble {
    fn assemble(
        grid: TimeGrid,
        levy: LevyMeasure,
        n_paths: usize,
        seed: u64,
        measure: Measure,
        drift: Vec<f64>,
        compensator: Vec<f64>,
    ) -> Self {
        let m = grid.steps();
        let j_count = levy.len();
        let (increments, counts) = generate(&grid, j_count, n_paths, seed, &drift, &compensator);
        let mut brownian = vec![0.0; (m + 1) * n_paths];
        let mut compensated = vec![0.0; (m + 1) * j_count * n_paths];
        let weights = levy.weights();
        for i in 0..m {
            let (cur, next) = brownian.split_at_mut((i + 1) * n_paths);
            let cur = &cur[i * n_paths..];
            for n in 0..n_paths {
                next[n] = cur[n] + increments[i * n_paths + n];
            }
            for (j, w) in weights.iter().enumerate() {
                let p_comp = w * grid.dt();
                let src = (i * j_count + j) * n_paths;
                let dst = ((i + 1) * j_count + j) * n_paths;
                for n in 0..n_paths {
                    compensated[dst + n] = compensated[src + n] + counts[src + n] as f64 - p_comp;
                }
            }
        }
        PathEnsemble { grid, levy, n_paths, seed, measure, increments, counts, drift, compensator, brownian, compensated }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    pub fn levy(&self) -> &LevyMeasure {
        &self.levy
    }
    pub fn n_paths(&self) -> usize {
        self.n_paths
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn measure(&self) -> Measure {
        self.measure
    }
    pub fn atoms(&self) -> usize {
        self.levy.len()
    }

    /// Raw Brownian increments over `[t_i, t_{i+1}]`, one per path.
    pub fn db(&self, i: usize) -> &[f64] {
        &self.increments[i * self.n_paths..(i + 1) * self.n_paths]
    }
    /// Jump counts of atom `j` over `[t_i, t_{i+1}]`.
    pub fn counts(&self, i: usize, j: usize) -> &[u32] {
        let r = i * self.atoms() + j;
        &self.counts[r * self.n_paths..(r + 1) * self.n_paths]
    }
    /// `B(t_i)` per path (raw, as seen under P).
    pub fn brownian(&self, i: usize) -> &[f64] {
        &self.brownian[i * self.n_paths..(i + 1) * self.n_paths]
    }
    /// `Ñ_j(t_i) = N_j(t_i) − w_j t_i` per path.
    pub fn compensated(&self, i: usize, j: usize) -> &[f64] {
        let r = i * self.atoms() + j;
        &self.compensated[r * self.n_paths..(r + 1) * self.n_paths]
    }
    /// Mean of the raw Brownian increment at step `i` under the ensemble measure.
    pub fn drift(&self, i: usize) -> f64 {
        self.drift[i]
    }
    /// Expected count of atom `j` at step `i` under the ensemble measure.
    pub fn compensator(&self, i: usize, j: usize) -> f64 {
        self.compensator[i * self.atoms() + j]
    }
    /// P-compensated jump increment `ΔÑ_j = ΔN_j − w_j Δt`.
    pub fn dn_p(&self, i: usize, j: usize, n: usize) -> f64 {
        self.counts(i, j)[n] as f64 - self.levy.atoms()[j].weight * self.grid.dt()
    }
    /// Martingale Brownian increment under the ensemble measure.
    pub fn dw(&self, i: usize, n: usize) -> f64 {
        self.increments[i * self.n_paths + n] - self.drift[i]
    }
    /// Martingale jump increment under the ensemble measure.
    pub fn dn(&self, i: usize, j: usize, n: usize) -> f64 {
        self.counts(i, j)[n] as f64 - self.compensator(i, j)
    }

    pub fn path(&self, n: usize) -> PathView<'_> {
        PathView { ens: self, n }
    }
}

/// Read-only view of a single path.
#[derive(Clone, Copy)]
pub struct PathView<'a> {
    pub ens: &'a PathEnsemble,
    pub n: usize,
}

impl<'a> PathView<'a> {
    pub fn db(&self, i: usize) -> f64 {
        self.ens.db(i)[self.n]
    }
    pub fn count(&self, i: usize, j: usize) -> u32 {
        self.ens.counts(i, j)[self.n]
    }
    pub fn dn_p(&self, i: usize, j: usize) -> f64 {
        self.ens.dn_p(i, j, self.n)
    }
    pub fn brownian(&self, i: usize) -> f64 {
        self.ens.brownian(i)[self.n]
    }
    pub fn compensated(&self, i: usize, j: usize) -> f64 {
        self.ens.compensated(i, j)[self.n]
    }
}

pub fn simulate_ensemble(grid: &TimeGrid, levy: &LevyMeasure, n_paths: usize, seed: u64) -> Result<PathEnsemble> {
    if n_paths == 0 {
        return Err(Error::Config("n_paths must be at least 1".into()));
    }
    let m = grid.steps();
    let drift = vec![0.0; m];
    let compensator: Vec<f64> = (0..m)
        .flat_map(|_| levy.atoms().iter().map(|a| a.weight * grid.dt()))
        .collect();
    Ok(PathEnsemble::assemble(grid.clone(), levy.clone(), n_paths, seed, Measure::P, drift, compensator))
}

fn check_tilt(grid: &TimeGrid, levy: &LevyMeasure, eta: &AtomProfile) -> Result<()> {
    for i in 0..=grid.steps() {
        let t = grid.node(i);
        for (j, a) in levy.atoms().iter().enumerate() {
            let e = eta.value(t, j, a.mark);
            if !(1.0 + e > 0.0) {
                return Err(Error::Domain(format!(
                    "1 + η¹(t={t}, ζ={}) = {} is not positive",
                    a.mark,
                    1.0 + e
                )));
            }
        }
    }
    Ok(())
}

/// Density process `M(t_i)` per path, node-major `(M+1) × n_paths`.
#[derive(Clone, Debug)]
pub struct GirsanovDensity {
    n_paths: usize,
    values: Vec<f64>,
}

impl GirsanovDensity {
    pub fn at(&self, i: usize) -> &[f64] {
        &self.values[i * self.n_paths..(i + 1) * self.n_paths]
    }
    pub fn terminal(&self) -> &[f64] {
        let m = self.values.len() / self.n_paths - 1;
        self.at(m)
    }
}

/// Stochastic-exponential density with the squared Brownian correction,
/// evaluated exactly on the grid increments.
pub fn girsanov_density(ens: &PathEnsemble, beta: &Profile, eta: &AtomProfile) -> Result<GirsanovDensity> {
    if ens.measure() != Measure::P {
        return Err(Error::Capability("the density is defined on a P-ensemble".into()));
    }
    let grid = ens.grid();
    check_tilt(grid, ens.levy(), eta)?;
    let n_paths = ens.n_paths();
    let m = grid.steps();
    let dt = grid.dt();
    let atoms = ens.levy().atoms();
    let mut log_m = vec![0.0; n_paths];
    let mut values = vec![1.0; (m + 1) * n_paths];
    for i in 0..m {
        let t = grid.node(i);
        let b = beta.value(t);
        let mut step_const = -0.5 * b * b * dt;
        let mut jump_log = Vec::with_capacity(atoms.len());
        for (j, a) in atoms.iter().enumerate() {
            let e = eta.value(t, j, a.mark);
            let l = (1.0 + e).ln();
            step_const += (l - e) * a.weight * dt;
            jump_log.push(l);
        }
        let db = ens.db(i);
        let out = &mut values[(i + 1) * n_paths..(i + 2) * n_paths];
        log_m.par_iter_mut().zip(out.par_iter_mut()).enumerate().for_each(|(n, (lm, o))| {
            let mut inc = b * db[n] + step_const;
            for (j, l) in jump_log.iter().enumerate() {
                inc += l * ens.dn_p(i, j, n);
            }
            *lm += inc;
            *o = lm.exp();
        });
    }
    Ok(GirsanovDensity { n_paths, values })
}

/// Regenerates the ensemble under Q: Brownian increments gain mean `β¹Δt`
/// and atom intensities become `(1 + η¹) w_j Δt`. Uses the same seed, so a
/// trivial shift reproduces the input bit for bit.
pub fn shift_to_q(ens: &PathEnsemble, beta: &Profile, eta: &AtomProfile) -> Result<PathEnsemble> {
    if ens.measure() != Measure::P {
        return Err(Error::Capability("shift_to_q expects a P-ensemble".into()));
    }
    let grid = ens.grid();
    check_tilt(grid, ens.levy(), eta)?;
    let dt = grid.dt();
    let m = grid.steps();
    let drift: Vec<f64> = (0..m).map(|i| beta.value(grid.node(i)) * dt).collect();
    let mut compensator = Vec::with_capacity(m * ens.atoms());
    for i in 0..m {
        let t = grid.node(i);
        for (j, a) in ens.levy().atoms().iter().enumerate() {
            compensator.push((1.0 + eta.value(t, j, a.mark)) * a.weight * dt);
        }
    }
    Ok(PathEnsemble::assemble(
        grid.clone(),
        ens.levy().clone(),
        ens.n_paths(),
        ens.seed(),
        Measure::Q,
        drift,
        compensator,
    ))
}
